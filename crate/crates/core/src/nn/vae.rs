use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, MlpSpec};
use super::params::ParamVector;
use super::Objective;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const ENCODER_PREFIX: &str = "vae.enc";
pub const DECODER_PREFIX: &str = "vae.dec";

/// Encoder `d → hidden → (μ, log σ²)` and mirrored decoder `h → hidden → d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl VaeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.input_dim {
            return Err(Error::invalid(format!(
                "latent_dim must lie in [1, {}], got {}",
                self.input_dim, self.latent_dim
            )));
        }
        self.encoder().validate()
    }

    /// Downsampling factor `d / h`.
    pub fn downsampling_factor(&self) -> f64 {
        self.input_dim as f64 / self.latent_dim as f64
    }

    pub fn encoder(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: 2 * self.latent_dim,
            activation: self.activation,
        }
    }

    pub fn decoder(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.latent_dim,
            hidden_dims: self.hidden_dims.iter().rev().copied().collect(),
            output_dim: self.input_dim,
            activation: self.activation,
        }
    }

    pub fn segments(&self) -> Vec<(String, usize)> {
        let mut segs = self.encoder().segments(ENCODER_PREFIX);
        segs.extend(self.decoder().segments(DECODER_PREFIX));
        segs
    }
}

pub fn init_vae(spec: &VaeSpec, rng: &mut Rng) -> Result<ParamVector> {
    spec.validate()?;
    let mut params = ParamVector::zeros(&spec.segments());
    spec.encoder().init_into(ENCODER_PREFIX, &mut params, rng)?;
    spec.decoder().init_into(DECODER_PREFIX, &mut params, rng)?;
    Ok(params)
}

struct BoundVae {
    encoder: Mlp,
    decoder: Mlp,
    latent: usize,
}

impl BoundVae {
    fn bind(spec: &VaeSpec, params: &ParamVector) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::bind(&spec.encoder(), ENCODER_PREFIX, params)?,
            decoder: Mlp::bind(&spec.decoder(), DECODER_PREFIX, params)?,
            latent: spec.latent_dim,
        })
    }
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

/// Posterior mean and log-variance for one input.
pub fn vae_encode(params: &ParamVector, spec: &VaeSpec, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("vae input", spec.input_dim, features.len())?;
    let vae = BoundVae::bind(spec, params)?;
    let mut out = vae.encoder.forward(&params.values, features);
    let logvar = out.split_off(vae.latent);
    Ok((out, logvar))
}

pub fn vae_decode(params: &ParamVector, spec: &VaeSpec, z: &[f64]) -> Result<Vec<f64>> {
    check_len("vae latent", spec.latent_dim, z.len())?;
    let vae = BoundVae::bind(spec, params)?;
    Ok(vae.decoder.forward(&params.values, z))
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dimensions.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

fn loss_and_grad_inner(
    params: &ParamVector,
    spec: &VaeSpec,
    batch: &[&Sample],
    kl_weight: f64,
    noise: &[Vec<f64>],
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("vae batch"));
    }
    check_len("vae noise", batch.len(), noise.len())?;
    let vae = BoundVae::bind(spec, params)?;
    let h = spec.latent_dim;
    let d = spec.input_dim as f64;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = if want_grad { vec![0.0; params.len()] } else { Vec::new() };
    let mut total = 0.0;
    for (s, eps) in batch.iter().zip(noise) {
        let x = s.features_f64();
        check_len("vae input", spec.input_dim, x.len())?;
        check_len("vae noise", h, eps.len())?;
        let (enc_out, enc_trace) = vae.encoder.forward_traced(&params.values, &x);
        let (mu, logvar) = enc_out.split_at(h);
        let sd: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..h).map(|i| mu[i] + sd[i] * eps[i]).collect();
        let (recon, dec_trace) = vae.decoder.forward_traced(&params.values, &z);
        let mse = recon.iter().zip(&x).map(|(r, t)| (r - t).powi(2)).sum::<f64>() / d;
        let kl = kl_standard_normal(mu, logvar);
        let loss = mse + kl_weight * kl;
        if !loss.is_finite() {
            return Err(Error::NonFinite("vae loss"));
        }
        total += loss;
        if want_grad {
            let d_recon: Vec<f64> = recon
                .iter()
                .zip(&x)
                .map(|(r, t)| scale * 2.0 * (r - t) / d)
                .collect();
            let dz = vae
                .decoder
                .backward(&params.values, &dec_trace, &d_recon, &mut grad);
            let mut d_enc = vec![0.0; 2 * h];
            for i in 0..h {
                d_enc[i] = dz[i] + scale * kl_weight * mu[i];
                d_enc[h + i] = dz[i] * eps[i] * 0.5 * sd[i]
                    + scale * kl_weight * 0.5 * (logvar[i].exp() - 1.0);
            }
            vae.encoder
                .backward(&params.values, &enc_trace, &d_enc, &mut grad);
        }
    }
    Ok((total * scale, grad))
}

/// Mean over the batch of reconstruction MSE plus `kl_weight`·KL, with the
/// reparameterized latent `z = μ + exp(logvar/2)·ε` using the given noise.
pub fn vae_loss(
    params: &ParamVector,
    spec: &VaeSpec,
    batch: &[&Sample],
    kl_weight: f64,
    noise: &[Vec<f64>],
) -> Result<f64> {
    Ok(loss_and_grad_inner(params, spec, batch, kl_weight, noise, false)?.0)
}

/// The VAE loss with fresh reparameterization noise drawn from the stream.
#[derive(Debug, Clone)]
pub struct VaeObjective {
    pub spec: VaeSpec,
    pub kl_weight: f64,
}

impl VaeObjective {
    fn draw_noise(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| rng::normal_vec(rng, self.spec.latent_dim))
            .collect()
    }
}

impl Objective for VaeObjective {
    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let noise = self.draw_noise(batch.len(), rng);
        loss_and_grad_inner(params, &self.spec, batch, self.kl_weight, &noise, true)
    }

    fn loss(&self, params: &ParamVector, batch: &[&Sample], rng: &mut Rng) -> Result<f64> {
        let noise = self.draw_noise(batch.len(), rng);
        vae_loss(params, &self.spec, batch, self.kl_weight, &noise)
    }
}

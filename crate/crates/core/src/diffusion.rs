//! Latent DDPM: linear noise schedule, closed-form forward noising, a small
//! class-conditional noise predictor and the ancestral sampler.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, Objective, ParamVector};
use crate::rng::{self, Rng};

/// Per-timestep tables, stored zero-based: index `t − 1` holds step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds `α` and `ᾱ` from a β table.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }
}

/// Linear β schedule from `beta_1` to `beta_T` over `T` steps.
pub fn make_schedule(timesteps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::invalid("T must be >= 1"));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let beta = if timesteps == 1 {
        vec![beta_1]
    } else {
        (0..timesteps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    DiffusionSchedule::from_betas(beta)
}

/// `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`.
pub fn forward_sample(z0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            context: "forward noise",
            expected: z0.len(),
            found: eps.len(),
        });
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| signal * z + noise * e).collect())
}

pub const DENOISER_PREFIX: &str = "den";
const LABEL_EMBEDDING: &str = "den.label_embedding";

/// Noise predictor `ε_φ(z_t, t, y)`: an MLP over the concatenation of the
/// noisy latent, a sinusoidal timestep embedding and a learned label
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub label_embed_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.num_classes == 0
            || self.label_embed_dim == 0
            || self.time_embed_dim == 0
        {
            return Err(Error::invalid("denoiser dimensions must be >= 1"));
        }
        self.network().validate()
    }

    pub fn network(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.latent_dim + self.time_embed_dim + self.label_embed_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.latent_dim,
            activation: self.activation,
        }
    }

    pub fn segments(&self) -> Vec<(String, usize)> {
        let mut segs = vec![(LABEL_EMBEDDING.to_string(), self.num_classes * self.label_embed_dim)];
        segs.extend(self.network().segments(DENOISER_PREFIX));
        segs
    }
}

pub fn init_denoiser(spec: &DenoiserSpec, rng: &mut Rng) -> Result<ParamVector> {
    spec.validate()?;
    let mut params = ParamVector::zeros(&spec.segments());
    for v in params.slice_mut(LABEL_EMBEDDING)? {
        *v = rng::normal(rng) * 0.5;
    }
    spec.network().init_into(DENOISER_PREFIX, &mut params, rng)?;
    Ok(params)
}

/// Sinusoidal embedding of an integer timestep (odd dimensions pad with 0).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

struct BoundDenoiser {
    mlp: Mlp,
    embedding_offset: usize,
}

impl BoundDenoiser {
    fn bind(spec: &DenoiserSpec, params: &ParamVector) -> Result<Self> {
        let seg = params.segment(LABEL_EMBEDDING)?;
        if seg.len != spec.num_classes * spec.label_embed_dim {
            return Err(Error::LayoutMismatch("label embedding size".into()));
        }
        Ok(Self {
            mlp: Mlp::bind(&spec.network(), DENOISER_PREFIX, params)?,
            embedding_offset: seg.offset,
        })
    }

    fn input(&self, spec: &DenoiserSpec, p: &[f64], z: &[f64], t: usize, label: usize) -> Vec<f64> {
        let e = spec.label_embed_dim;
        let start = self.embedding_offset + label * e;
        let mut x = Vec::with_capacity(spec.latent_dim + spec.time_embed_dim + e);
        x.extend_from_slice(z);
        x.extend(timestep_embedding(t, spec.time_embed_dim));
        x.extend_from_slice(&p[start..start + e]);
        x
    }
}

fn check_inputs(spec: &DenoiserSpec, z: &[f64], label: usize) -> Result<()> {
    if z.len() != spec.latent_dim {
        return Err(Error::DimensionMismatch {
            context: "denoiser latent",
            expected: spec.latent_dim,
            found: z.len(),
        });
    }
    if label >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.num_classes,
        });
    }
    Ok(())
}

pub fn denoiser_forward(
    params: &ParamVector,
    spec: &DenoiserSpec,
    z_t: &[f64],
    t: usize,
    label: usize,
) -> Result<Vec<f64>> {
    check_inputs(spec, z_t, label)?;
    let den = BoundDenoiser::bind(spec, params)?;
    Ok(den.mlp.forward(&params.values, &den.input(spec, &params.values, z_t, t, label)))
}

/// The conditional denoising loss: for each latent draw `t ~ U{1..T}` and
/// `ε ~ N(0, I)`, then average `‖ε − ε_φ(z_t, t, y)‖²`.
#[derive(Debug, Clone)]
pub struct CdmObjective {
    pub spec: DenoiserSpec,
    pub schedule: DiffusionSchedule,
}

impl CdmObjective {
    fn run(&self, params: &ParamVector, batch: &[&Sample], rng: &mut Rng, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("diffusion batch"));
        }
        let den = BoundDenoiser::bind(&self.spec, params)?;
        let p = &params.values;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = if want_grad { vec![0.0; params.len()] } else { Vec::new() };
        let mut total = 0.0;
        let e = self.spec.label_embed_dim;
        let emb_in = self.spec.latent_dim + self.spec.time_embed_dim;
        for s in batch {
            let label = s
                .label()
                .ok_or_else(|| Error::invalid("diffusion training needs labeled latents"))?;
            let z0 = s.features_f64();
            check_inputs(&self.spec, &z0, label)?;
            let t = rng::uniform_inclusive(rng, 1, self.schedule.timesteps());
            let eps = rng::normal_vec(rng, self.spec.latent_dim);
            let z_t = forward_sample(&z0, t, &eps, &self.schedule)?;
            let input = den.input(&self.spec, p, &z_t, t, label);
            let (pred, trace) = den.mlp.forward_traced(p, &input);
            let mut sq = 0.0;
            let mut d_out = Vec::with_capacity(pred.len());
            for (pi, ei) in pred.iter().zip(&eps) {
                let diff = pi - ei;
                sq += diff * diff;
                d_out.push(2.0 * diff * scale);
            }
            total += sq;
            if want_grad {
                let d_in = den.mlp.backward(p, &trace, &d_out, &mut grad);
                let start = den.embedding_offset + label * e;
                for k in 0..e {
                    grad[start + k] += d_in[emb_in + k];
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("diffusion loss"));
        }
        Ok((loss, grad))
    }
}

impl Objective for CdmObjective {
    fn loss_and_grad(&self, params: &ParamVector, batch: &[&Sample], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        self.run(params, batch, rng, true)
    }

    fn loss(&self, params: &ParamVector, batch: &[&Sample], rng: &mut Rng) -> Result<f64> {
        Ok(self.run(params, batch, rng, false)?.0)
    }
}

/// Mean denoising loss over labeled latents with draws from `rng`.
pub fn cdm_loss(
    params: &ParamVector,
    spec: &DenoiserSpec,
    latents: &[&Sample],
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    CdmObjective {
        spec: spec.clone(),
        schedule: schedule.clone(),
    }
    .loss(params, latents, rng)
}

/// Noise scale of the reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `σ_t = √(1 − ᾱ_t)`.
    #[default]
    Marginal,
    /// `σ_t = √β_t`.
    DdpmBeta,
}

/// Any noise predictor usable by the sampler.
pub trait NoisePredictor: Sync {
    fn predict(&self, z_t: &[f64], t: usize, label: usize) -> Vec<f64>;
}

/// A trained denoiser bound to its parameters.
pub struct Denoiser<'a> {
    spec: &'a DenoiserSpec,
    params: &'a ParamVector,
    bound: BoundDenoiser,
}

impl<'a> Denoiser<'a> {
    pub fn new(spec: &'a DenoiserSpec, params: &'a ParamVector) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            params,
            bound: BoundDenoiser::bind(spec, params)?,
        })
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, z_t: &[f64], t: usize, label: usize) -> Vec<f64> {
        let p = &self.params.values;
        self.bound
            .mlp
            .forward(p, &self.bound.input(self.spec, p, z_t, t, label))
    }
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`:
///
/// ```text
/// z_{t−1} = (z_t − (1 − α_t)/√(1 − ᾱ_t) · ε_φ(z_t, t, c)) / √α_t + σ_t · ε
/// ```
///
/// with `ε = 0` at `t = 1`.
pub fn sample_latent_with(
    predictor: &dyn NoisePredictor,
    latent_dim: usize,
    label: usize,
    schedule: &DiffusionSchedule,
    variance: PosteriorVariance,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut z = rng::normal_vec(rng, latent_dim);
    for t in (1..=schedule.timesteps()).rev() {
        let i = t - 1;
        let alpha = schedule.alpha[i];
        let one_minus_ab = 1.0 - schedule.alpha_bar[i];
        let pred = predictor.predict(&z, t, label);
        let coef = (1.0 - alpha) / one_minus_ab.sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        for (zk, pk) in z.iter_mut().zip(&pred) {
            *zk = inv_sqrt_alpha * (*zk - coef * pk);
        }
        if t > 1 {
            let sigma = match variance {
                PosteriorVariance::Marginal => one_minus_ab.sqrt(),
                PosteriorVariance::DdpmBeta => schedule.beta[i].sqrt(),
            };
            for zk in z.iter_mut() {
                *zk += sigma * rng::normal(rng);
            }
        }
    }
    z
}

pub fn sample_latent(
    params: &ParamVector,
    spec: &DenoiserSpec,
    label: usize,
    schedule: &DiffusionSchedule,
    variance: PosteriorVariance,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if label >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.num_classes,
        });
    }
    let den = Denoiser::new(spec, params)?;
    Ok(sample_latent_with(&den, spec.latent_dim, label, schedule, variance, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_midpoint() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let expected = 1e-4 + (499.0 / 999.0) * (2e-2 - 1e-4);
        assert!((s.beta[499] - expected).abs() < 1e-15);
        assert!((s.beta[499] - 0.010040).abs() < 1e-6);
        assert_eq!(s.beta[0], 1e-4);
        assert!((s.beta[999] - 2e-2).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[999] > 0.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.beta, vec![0.3]);
        assert!((s.alpha_bar[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 0.0, 2e-2).is_err());
        assert!(make_schedule(10, 0.5, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_rebuilds_from_beta() {
        let s = make_schedule(200, 1e-4, 2e-2).unwrap();
        let rebuilt = DiffusionSchedule::from_betas(s.beta.clone()).unwrap();
        for (a, b) in s.alpha_bar.iter().zip(&rebuilt.alpha_bar) {
            assert!((a - b).abs() <= 1e-12);
        }
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DiffusionSchedule>(&json).unwrap(), s);
    }

    fn quarter_schedule() -> DiffusionSchedule {
        // One step with ᾱ_1 = 0.75.
        DiffusionSchedule::from_betas(vec![0.25]).unwrap()
    }

    #[test]
    fn forward_sample_closed_form() {
        let s = quarter_schedule();
        let z = forward_sample(&[1.0], 1, &[0.0], &s).unwrap();
        assert!((z[0] - 0.75f64.sqrt()).abs() < 1e-12);
        let z = forward_sample(&[1.0], 1, &[1.0], &s).unwrap();
        assert!((z[0] - (0.75f64.sqrt() + 0.5)).abs() < 1e-12);
        assert!((z[0] - 1.366025).abs() < 1e-6);
        assert!(forward_sample(&[1.0], 2, &[0.0], &s).is_err());
        assert!(forward_sample(&[1.0], 0, &[0.0], &s).is_err());
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z: &[f64], _: usize, _: usize) -> Vec<f64> {
            vec![0.0; z.len()]
        }
    }

    #[test]
    fn single_step_sampler_divides_by_sqrt_alpha() {
        let s = DiffusionSchedule::from_betas(vec![0.19]).unwrap();
        let v = rng::normal_vec(&mut rng::stream(4, &[]), 2);
        let z0 = sample_latent_with(&Zero, 2, 0, &s, PosteriorVariance::Marginal, &mut rng::stream(4, &[]));
        for (a, b) in z0.iter().zip(&v) {
            assert!((a - b / 0.81f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let spec = DenoiserSpec {
            latent_dim: 2,
            num_classes: 3,
            label_embed_dim: 4,
            time_embed_dim: 8,
            hidden_dims: vec![16],
            activation: Activation::Relu,
        };
        let params = init_denoiser(&spec, &mut rng::stream(1, &[])).unwrap();
        let s = make_schedule(20, 1e-4, 2e-2).unwrap();
        let a = sample_latent(&params, &spec, 1, &s, PosteriorVariance::Marginal, &mut rng::stream(9, &[])).unwrap();
        let b = sample_latent(&params, &spec, 1, &s, PosteriorVariance::Marginal, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
        assert!(sample_latent(&params, &spec, 3, &s, PosteriorVariance::Marginal, &mut rng::stream(9, &[])).is_err());
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(timestep_embedding(5, 7).len(), 7);
    }
}

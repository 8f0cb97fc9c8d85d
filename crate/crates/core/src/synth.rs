//! Distribution-aligned synthetic augmentation: class-histogram protocol,
//! per-class quotas and class-conditional generation through the decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{largest_remainder, Dataset, Provenance, Sample};
use crate::diffusion::{sample_latent_with, Denoiser, DenoiserSpec, DiffusionSchedule, PosteriorVariance};
use crate::error::{Error, Result};
use crate::nn::{vae_decode, ParamVector, VaeSpec};
use crate::par::Parallelism;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<usize>,
}

impl ClassHistogram {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            counts: dataset.class_counts(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Server-side sum of the clients' labeled histograms.
pub fn global_histogram(local: &[ClassHistogram]) -> Result<ClassHistogram> {
    let first = local.first().ok_or(Error::Empty("histogram list"))?;
    let mut counts = vec![0; first.counts.len()];
    for h in local {
        if h.counts.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                context: "class histogram",
                expected: counts.len(),
                found: h.counts.len(),
            });
        }
        for (acc, c) in counts.iter_mut().zip(&h.counts) {
            *acc += c;
        }
    }
    Ok(ClassHistogram { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Augmentation strength: (labeled + synthetic) / (labeled + unlabeled).
    pub alpha: f64,
    /// Optional upper bound on each class's synthetic count.
    pub class_caps: Option<Vec<usize>>,
    pub posterior_variance: PosteriorVariance,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            class_caps: None,
            posterior_variance: PosteriorVariance::Marginal,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    /// Desired labeled + synthetic count per class.
    pub targets: Vec<usize>,
    /// Synthetic samples to generate per class.
    pub quotas: Vec<usize>,
}

impl QuotaPlan {
    pub fn total(&self) -> usize {
        self.quotas.iter().sum()
    }

    /// Applies per-class caps.
    pub fn capped(mut self, caps: &[usize]) -> Result<Self> {
        if caps.len() != self.quotas.len() {
            return Err(Error::DimensionMismatch {
                context: "class caps",
                expected: self.quotas.len(),
                found: caps.len(),
            });
        }
        for (q, cap) in self.quotas.iter_mut().zip(caps) {
            *q = (*q).min(*cap);
        }
        Ok(self)
    }
}

/// `target_c = α·(|D^l| + |D^u|)·|D_g,c| / |D_g|` rounded by largest
/// remainder (ties to the lower class), and
/// `quota_c = max(0, target_c − |D^l_c|)`.
pub fn plan_quota(
    local_labeled: &ClassHistogram,
    n_unlabeled: usize,
    global: &ClassHistogram,
    alpha: f64,
) -> Result<QuotaPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    if local_labeled.counts.len() != global.counts.len() {
        return Err(Error::DimensionMismatch {
            context: "quota histograms",
            expected: global.counts.len(),
            found: local_labeled.counts.len(),
        });
    }
    if global.total() == 0 {
        return Err(Error::Empty("global labeled histogram"));
    }
    let local_total = (local_labeled.total() + n_unlabeled) as f64;
    let total = (alpha * local_total).round() as usize;
    let weights: Vec<f64> = global.counts.iter().map(|&c| c as f64).collect();
    let targets = largest_remainder(&weights, total);
    let quotas = targets
        .iter()
        .zip(&local_labeled.counts)
        .map(|(t, l)| t.saturating_sub(*l))
        .collect();
    Ok(QuotaPlan { targets, quotas })
}

/// Realized augmentation strength `(|D^l| + |D^syn|) / (|D^l| + |D^u|)`.
pub fn effective_alpha(labeled_total: usize, n_unlabeled: usize, synthetic_total: usize) -> Result<f64> {
    let denominator = labeled_total + n_unlabeled;
    if denominator == 0 {
        return Err(Error::Empty("client holds no data"));
    }
    Ok((labeled_total + synthetic_total) as f64 / denominator as f64)
}

/// Trained generative components shared by every client.
pub struct Generator<'a> {
    pub denoiser_spec: &'a DenoiserSpec,
    pub denoiser: &'a ParamVector,
    pub vae_spec: &'a VaeSpec,
    pub vae: &'a ParamVector,
    pub schedule: &'a DiffusionSchedule,
    pub variance: PosteriorVariance,
}

/// Samples `quota_c` latents per class and decodes them. Sample `(c, i)` of
/// client `k` uses the stream keyed `(k, c, i)`, and the output is ordered
/// by class then index whatever the parallelism.
pub fn generate_synthetic(
    quota: &QuotaPlan,
    generator: &Generator<'_>,
    client_id: usize,
    seed: u64,
    parallelism: &Parallelism,
) -> Result<Dataset> {
    let classes = quota.quotas.len();
    if generator.denoiser_spec.num_classes != classes {
        return Err(Error::DimensionMismatch {
            context: "quota classes",
            expected: generator.denoiser_spec.num_classes,
            found: classes,
        });
    }
    if generator.denoiser_spec.latent_dim != generator.vae_spec.latent_dim {
        return Err(Error::DimensionMismatch {
            context: "latent dimension",
            expected: generator.vae_spec.latent_dim,
            found: generator.denoiser_spec.latent_dim,
        });
    }
    let mut out = Dataset::new(format!("synthetic_client{client_id}"), classes, generator.vae_spec.input_dim);
    if quota.total() == 0 {
        return Ok(out);
    }
    let denoiser = Denoiser::new(generator.denoiser_spec, generator.denoiser)?;
    let jobs: Vec<(usize, usize)> = quota
        .quotas
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (0..n).map(move |i| (c, i)))
        .collect();
    let decoded = parallelism.map(&jobs, |&(c, i)| {
        let mut rng = rng::stream(seed, &[client_id as u64, c as u64, i as u64]);
        let z0 = sample_latent_with(
            &denoiser,
            generator.denoiser_spec.latent_dim,
            c,
            generator.schedule,
            generator.variance,
            &mut rng,
        );
        vae_decode(generator.vae, generator.vae_spec, &z0).map(|x| (c, x))
    });
    for item in decoded {
        let (c, x) = item?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoded synthetic sample"));
        }
        let features = x.iter().map(|&v| v as f32).collect();
        out.samples.push(Sample::with_provenance(features, c, Provenance::Synthetic));
    }
    Ok(out)
}

/// One entry of `quota.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaRecord {
    pub client_id: usize,
    pub alpha_requested: f64,
    pub alpha_realized: f64,
    pub targets: Vec<usize>,
    pub quotas: Vec<usize>,
}

pub fn write_quota_json(path: &Path, records: &[QuotaRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_quota_json(path: &Path) -> Result<Vec<QuotaRecord>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionConfig;
use crate::diffusion::{make_schedule, DenoiserSpec, DiffusionSchedule, PosteriorVariance};
use crate::error::{Error, Result};
use crate::fed::RoundConfig;
use crate::nn::{Activation, MlpSpec, OptimizerConfig, VaeSpec};
use crate::select::SelectionConfig;
use crate::synth::SynthesisConfig;

/// Where the world dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian classes. Without explicit `means`, 2-D means are
    /// placed evenly on a circle of `radius`.
    GaussianMixture {
        classes: usize,
        per_class: usize,
        sigma: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        means: Option<Vec<Vec<f64>>>,
    },
    /// A dataset directory with `manifest.json` and `features.bin`.
    File { path: PathBuf },
}

fn default_radius() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Fraction of every class held out as the common global test set.
    #[serde(default = "default_global_test")]
    pub global_test_fraction: f64,
}

fn default_global_test() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden_dims: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

fn tanh() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "tanh")]
    pub activation: Activation,
    #[serde(default = "default_kl")]
    pub kl_weight: f64,
}

fn default_kl() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub label_embed_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Federated schedule of each training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfigs {
    pub classifier: RoundConfig,
    pub vae: RoundConfig,
    pub cdm: RoundConfig,
    /// Used by the final retraining and by both baselines.
    pub retrain: RoundConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    None,
    FedavgLabeled,
    FedavgSl,
}

impl BaselineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::None => "ddsa_fssl",
            BaselineMode::FedavgLabeled => "fedavg_labeled",
            BaselineMode::FedavgSl => "fedavg_sl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub classifier: ClassifierConfig,
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub phases: PhaseConfigs,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default = "yes")]
    pub use_selection: bool,
    #[serde(default)]
    pub baseline_mode: BaselineMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; when absent the `DDSA_THREADS` variable decides.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// The desk-scale reference world: a 2-D four-class Gaussian mixture over
    /// five clients with Dirichlet label and unlabeled splits.
    pub fn reference() -> Self {
        let sgd = |lr: f64| OptimizerConfig {
            momentum: 0.9,
            ..OptimizerConfig::sgd(lr)
        };
        let adam = |lr: f64| OptimizerConfig::adam(lr, (0.9, 0.999));
        Self {
            dataset: DatasetConfig {
                source: DatasetSource::GaussianMixture {
                    classes: 4,
                    per_class: 250,
                    sigma: 0.6,
                    radius: 2.0,
                    means: None,
                },
                global_test_fraction: 0.2,
            },
            partition: PartitionConfig::default(),
            classifier: ClassifierConfig {
                hidden_dims: vec![16],
                activation: Activation::Relu,
            },
            vae: VaeConfig {
                latent_dim: 2,
                hidden_dims: vec![16],
                activation: Activation::Tanh,
                kl_weight: 1e-3,
            },
            denoiser: DenoiserConfig {
                label_embed_dim: 4,
                time_embed_dim: 8,
                hidden_dims: vec![64, 64],
                activation: Activation::Relu,
            },
            diffusion: DiffusionConfig::default(),
            phases: PhaseConfigs {
                classifier: RoundConfig {
                    rounds: 10,
                    local_epochs: 1,
                    batch_size: 16,
                    optimizer: sgd(0.05),
                    participation: 1.0,
                },
                vae: RoundConfig {
                    rounds: 20,
                    local_epochs: 5,
                    batch_size: 32,
                    optimizer: adam(1e-2),
                    participation: 1.0,
                },
                cdm: RoundConfig {
                    rounds: 50,
                    local_epochs: 10,
                    batch_size: 32,
                    optimizer: adam(5e-3),
                    participation: 1.0,
                },
                retrain: RoundConfig {
                    rounds: 10,
                    local_epochs: 1,
                    batch_size: 16,
                    optimizer: sgd(0.05),
                    participation: 1.0,
                },
            },
            selection: SelectionConfig::default(),
            synthesis: SynthesisConfig {
                posterior_variance: PosteriorVariance::DdpmBeta,
                ..SynthesisConfig::default()
            },
            use_selection: true,
            baseline_mode: BaselineMode::None,
            seed: 0,
            output_dir: None,
            threads: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        let f = self.dataset.global_test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("global_test_fraction must lie in (0, 1), got {f}")));
        }
        if let DatasetSource::GaussianMixture {
            classes,
            per_class,
            sigma,
            means,
            ..
        } = &self.dataset.source
        {
            if *classes == 0 || *per_class == 0 {
                return Err(Error::invalid("gaussian mixture needs classes and per_class >= 1"));
            }
            if !(*sigma >= 0.0) {
                return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
            }
            if let Some(m) = means {
                if m.len() != *classes {
                    return Err(Error::DimensionMismatch {
                        context: "mixture means",
                        expected: *classes,
                        found: m.len(),
                    });
                }
            }
        }
        for (name, phase) in [
            ("classifier", &self.phases.classifier),
            ("vae", &self.phases.vae),
            ("cdm", &self.phases.cdm),
            ("retrain", &self.phases.retrain),
        ] {
            phase.validate().map_err(|e| e.in_phase(name))?;
        }
        if !(self.vae.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight must be >= 0"));
        }
        self.selection.validate()?;
        self.synthesis.validate()?;
        make_schedule(
            self.diffusion.timesteps,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )?;
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(
            self.diffusion.timesteps,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
    }

    pub fn classifier_spec(&self, dim: usize, classes: usize) -> MlpSpec {
        MlpSpec {
            input_dim: dim,
            hidden_dims: self.classifier.hidden_dims.clone(),
            output_dim: classes,
            activation: self.classifier.activation,
        }
    }

    pub fn vae_spec(&self, dim: usize) -> VaeSpec {
        VaeSpec {
            input_dim: dim,
            latent_dim: self.vae.latent_dim,
            hidden_dims: self.vae.hidden_dims.clone(),
            activation: self.vae.activation,
        }
    }

    pub fn denoiser_spec(&self, classes: usize) -> DenoiserSpec {
        DenoiserSpec {
            latent_dim: self.vae.latent_dim,
            num_classes: classes,
            label_embed_dim: self.denoiser.label_embed_dim,
            time_embed_dim: self.denoiser.time_embed_dim,
            hidden_dims: self.denoiser.hidden_dims.clone(),
            activation: self.denoiser.activation,
        }
    }
}

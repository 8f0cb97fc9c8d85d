#![allow(dead_code)]

use ddsa_core::data::{circle_means, make_gaussian_mixture, Dataset, Sample};
use ddsa_core::diffusion::{init_denoiser, make_schedule, CdmObjective, DenoiserSpec};
use ddsa_core::nn::gradcheck::{check_gradient, GradCheckReport};
use ddsa_core::nn::{init_classifier, init_vae, Activation, ClassifierObjective, MlpSpec, VaeObjective, VaeSpec};
use ddsa_core::pipeline::ExperimentConfig;
use ddsa_core::rng;

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
/// Coordinates with smaller analytic gradients are skipped: their relative
/// error is dominated by finite-difference round-off.
pub const GRAD_FLOOR: f64 = 1e-6;

fn batch_data(dim: usize, seed: u64) -> Dataset {
    let means: Vec<Vec<f64>> = circle_means(3, 1.5)
        .into_iter()
        .map(|m| (0..dim).map(|i| m[i % 2]).collect())
        .collect();
    make_gaussian_mixture(3, 3, &means, 0.5, seed).unwrap()
}

pub fn classifier_gradcheck(seed: u64) -> GradCheckReport {
    let spec = MlpSpec {
        input_dim: 2,
        hidden_dims: vec![5, 4],
        output_dim: 3,
        activation: Activation::Tanh,
    };
    let params = init_classifier(&spec, &mut rng::stream(seed, &[1])).unwrap();
    let ds = batch_data(2, seed);
    let batch: Vec<&Sample> = ds.samples.iter().collect();
    check_gradient(&ClassifierObjective::new(spec), &params, &batch, seed, GRAD_STEP, GRAD_FLOOR).unwrap()
}

pub fn vae_gradcheck(seed: u64) -> GradCheckReport {
    let spec = VaeSpec {
        input_dim: 4,
        latent_dim: 2,
        hidden_dims: vec![5],
        activation: Activation::Tanh,
    };
    let params = init_vae(&spec, &mut rng::stream(seed, &[2])).unwrap();
    let ds = batch_data(4, seed);
    let batch: Vec<&Sample> = ds.samples.iter().collect();
    let objective = VaeObjective { spec, kl_weight: 0.1 };
    check_gradient(&objective, &params, &batch, seed, GRAD_STEP, GRAD_FLOOR).unwrap()
}

pub fn denoiser_gradcheck(seed: u64) -> GradCheckReport {
    let spec = DenoiserSpec {
        latent_dim: 2,
        num_classes: 3,
        label_embed_dim: 3,
        time_embed_dim: 4,
        hidden_dims: vec![6],
        activation: Activation::Tanh,
    };
    let params = init_denoiser(&spec, &mut rng::stream(seed, &[3])).unwrap();
    let ds = batch_data(2, seed);
    let batch: Vec<&Sample> = ds.samples.iter().collect();
    let objective = CdmObjective {
        spec,
        schedule: make_schedule(50, 1e-4, 2e-2).unwrap(),
    };
    check_gradient(&objective, &params, &batch, seed, GRAD_STEP, GRAD_FLOOR).unwrap()
}

/// A scaled-down reference world that runs in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference();
    if let ddsa_core::pipeline::DatasetSource::GaussianMixture { per_class, .. } = &mut cfg.dataset.source {
        *per_class = 60;
    }
    cfg.partition.clients = 3;
    cfg.phases.classifier.rounds = 3;
    cfg.phases.vae.rounds = 3;
    cfg.phases.vae.local_epochs = 2;
    cfg.phases.cdm.rounds = 4;
    cfg.phases.cdm.local_epochs = 2;
    cfg.phases.retrain.rounds = 3;
    cfg.diffusion.timesteps = 30;
    cfg.denoiser.hidden_dims = vec![16];
    cfg
}

pub struct TrainedCdm {
    pub spec: DenoiserSpec,
    pub params: ddsa_core::nn::ParamVector,
    pub schedule: ddsa_core::diffusion::DiffusionSchedule,
}

/// Trains a denoiser on `latents` as a single federated client.
pub fn train_cdm(latents: Dataset, timesteps: usize, rounds: usize, epochs: usize, seed: u64) -> TrainedCdm {
    use ddsa_core::fed::{run_federated, ClientState, FedRun, RoundConfig};
    use ddsa_core::nn::OptimizerConfig;
    use ddsa_core::par::Parallelism;

    let spec = DenoiserSpec {
        latent_dim: latents.dim,
        num_classes: latents.num_classes,
        label_embed_dim: 4,
        time_embed_dim: 8,
        hidden_dims: vec![64, 64],
        activation: Activation::Relu,
    };
    let schedule = make_schedule(timesteps, 1e-4, 2e-2).unwrap();
    let init = init_denoiser(&spec, &mut rng::stream(seed, &[1])).unwrap();
    let objective = CdmObjective {
        spec: spec.clone(),
        schedule: schedule.clone(),
    };
    let cfg = RoundConfig {
        rounds,
        local_epochs: epochs,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(5e-3, (0.9, 0.999)),
        participation: 1.0,
    };
    let mut clients = vec![ClientState::new(0, latents, &init)];
    let par = Parallelism::sequential();
    let run = FedRun {
        phase: "cdm",
        seed,
        parallelism: &par,
        probe: None,
    };
    let params = run_federated(&mut clients, &cfg, &objective, &init, &run).unwrap().params;
    TrainedCdm { spec, params, schedule }
}

/// Mean of `n` sampled latents per class.
pub fn class_sample_means(
    cdm: &TrainedCdm,
    n: usize,
    variance: ddsa_core::diffusion::PosteriorVariance,
    seed: u64,
) -> Vec<Vec<f64>> {
    (0..cdm.spec.num_classes)
        .map(|c| {
            let mut mean = vec![0.0; cdm.spec.latent_dim];
            for i in 0..n {
                let mut r = rng::stream(seed, &[9, c as u64, i as u64]);
                let z = ddsa_core::diffusion::sample_latent(&cdm.params, &cdm.spec, c, &cdm.schedule, variance, &mut r)
                    .unwrap();
                for (m, zi) in mean.iter_mut().zip(z) {
                    *m += zi / n as f64;
                }
            }
            mean
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    (0..centers.len())
        .min_by(|&i, &j| sq_dist(point, &centers[i]).total_cmp(&sq_dist(point, &centers[j])))
        .unwrap()
}

pub const FIDELITY_MEANS: [[f64; 2]; 3] = [[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]];

/// Trains on a 3-class 2-D mixture with `T = 200` and reports whether every
/// class's sample mean lies nearest its own mixture mean.
pub fn fidelity_trial(seed: u64, variance: ddsa_core::diffusion::PosteriorVariance) -> (bool, Vec<Vec<f64>>) {
    let means: Vec<Vec<f64>> = FIDELITY_MEANS.iter().map(|m| m.to_vec()).collect();
    let ds = make_gaussian_mixture(3, 200, &means, 0.3, seed).unwrap();
    let cdm = train_cdm(ds, 200, 40, 5, seed);
    let got = class_sample_means(&cdm, 200, variance, seed);
    let ok = got.iter().enumerate().all(|(c, m)| nearest(m, &means) == c);
    (ok, got)
}

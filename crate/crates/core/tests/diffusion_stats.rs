mod common;

use common::{class_sample_means, fidelity_trial, train_cdm};
use ddsa_core::data::{make_gaussian_mixture, Sample};
use ddsa_core::diffusion::{cdm_loss, forward_sample, make_schedule, DenoiserSpec, PosteriorVariance};
use ddsa_core::nn::{Activation, ParamVector};
use ddsa_core::rng;

const DRAWS: usize = 10_000;

#[test]
fn forward_moments_within_three_standard_errors() {
    let schedule = make_schedule(200, 1e-4, 2e-2).unwrap();
    let z0 = [1.0, -2.0];
    let mut r = rng::stream(7, &[]);
    for t in [1, 50, 200] {
        let ab = schedule.alpha_bar_at(t).unwrap();
        let var = 1.0 - ab;
        let draws: Vec<Vec<f64>> = (0..DRAWS)
            .map(|_| forward_sample(&z0, t, &rng::normal_vec(&mut r, 2), &schedule).unwrap())
            .collect();
        for k in 0..2 {
            let n = DRAWS as f64;
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n;
            let s2 = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se_mean = (var / n).sqrt();
            let se_var = var * (2.0 / (n - 1.0)).sqrt();
            assert!((mean - ab.sqrt() * z0[k]).abs() <= 3.0 * se_mean, "t={t} mean {mean}");
            assert!((s2 - var).abs() <= 3.0 * se_var, "t={t} var {s2} vs {var}");
        }
    }
}

#[test]
fn zero_denoiser_loss_is_latent_dim() {
    let spec = DenoiserSpec {
        latent_dim: 2,
        num_classes: 2,
        label_embed_dim: 2,
        time_embed_dim: 4,
        hidden_dims: vec![4],
        activation: Activation::Relu,
    };
    let params = ParamVector::zeros(&spec.segments());
    let latents: Vec<Sample> = (0..DRAWS).map(|i| Sample::labeled(vec![0.5, -0.5], i % 2)).collect();
    let batch: Vec<&Sample> = latents.iter().collect();
    let schedule = make_schedule(100, 1e-4, 2e-2).unwrap();
    let loss = cdm_loss(&params, &spec, &batch, &schedule, &mut rng::stream(3, &[])).unwrap();
    // ‖ε‖² is chi-squared with h = 2 degrees of freedom: mean 2, variance 4.
    let se = (4.0 / DRAWS as f64).sqrt();
    assert!((loss - 2.0).abs() <= 3.0 * se, "loss {loss}");
}

#[test]
fn point_mass_latents_are_recovered() {
    let means = vec![vec![1.5, 0.0], vec![-1.5, 0.5]];
    let ds = make_gaussian_mixture(2, 100, &means, 0.0, 1).unwrap();
    let cdm = train_cdm(ds, 100, 30, 5, 1);
    let got = class_sample_means(&cdm, 500, PosteriorVariance::DdpmBeta, 1);
    for (g, m) in got.iter().zip(&means) {
        assert!(common::sq_dist(g, m).sqrt() < 0.1, "{g:?} vs {m:?}");
    }
}

#[test]
fn conditional_samples_land_near_their_class() {
    for seed in 0..2 {
        let (ok, got) = fidelity_trial(seed, PosteriorVariance::Marginal);
        assert!(ok, "seed {seed}: {got:?}");
    }
}

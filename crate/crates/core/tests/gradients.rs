mod common;

use common::{classifier_gradcheck, denoiser_gradcheck, vae_gradcheck, GRAD_TOL};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[test]
fn classifier_backward_matches_finite_differences() {
    for seed in SEEDS {
        let r = classifier_gradcheck(seed);
        assert!(r.passes(GRAD_TOL), "seed {seed}: {r:?}");
    }
}

#[test]
fn vae_backward_matches_finite_differences() {
    for seed in SEEDS {
        let r = vae_gradcheck(seed);
        assert!(r.passes(GRAD_TOL), "seed {seed}: {r:?}");
    }
}

#[test]
fn denoiser_backward_matches_finite_differences() {
    for seed in SEEDS {
        let r = denoiser_gradcheck(seed);
        assert!(r.passes(GRAD_TOL), "seed {seed}: {r:?}");
    }
}

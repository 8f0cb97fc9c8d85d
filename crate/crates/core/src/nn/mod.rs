//! Small differentiable models with exact reverse-mode gradients.

mod classifier;
pub mod gradcheck;
mod mlp;
mod optim;
mod params;
mod vae;

pub use classifier::{
    argmax, classifier_forward, classifier_segments, cross_entropy, cross_entropy_with_grad,
    init_classifier, ClassifierObjective, CLASSIFIER_PREFIX,
};
pub use mlp::{Activation, Mlp, MlpSpec, Trace};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{
    load_checkpoint, save_checkpoint, ParamVector, Segment, PARAMS_LAYOUT_FILE, PARAMS_VALUES_FILE,
};
pub use vae::{
    init_vae, kl_standard_normal, vae_decode, vae_encode, vae_loss, VaeObjective, VaeSpec,
    DECODER_PREFIX, ENCODER_PREFIX,
};

use crate::data::Sample;
use crate::error::Result;
use crate::rng::Rng;

/// A mean-over-batch loss with an exact gradient.
///
/// Stochastic objectives (VAE noise, diffusion timesteps) draw from `rng`;
/// `loss` and `loss_and_grad` must consume it identically so a replayed
/// stream reproduces the same loss.
pub trait Objective: Sync {
    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, params: &ParamVector, batch: &[&Sample], rng: &mut Rng) -> Result<f64> {
        Ok(self.loss_and_grad(params, batch, rng)?.0)
    }
}

/// Gradient of the mean batch loss, laid out like `params`.
pub fn grad(
    objective: &dyn Objective,
    params: &ParamVector,
    batch: &[&Sample],
    rng: &mut Rng,
) -> Result<ParamVector> {
    let (_, g) = objective.loss_and_grad(params, batch, rng)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::Error::NonFinite("gradient"));
    }
    params.with_values(g)
}

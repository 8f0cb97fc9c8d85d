//! Central finite-difference gradients, used to audit the hand-written
//! backward passes.

use super::params::ParamVector;
use super::Objective;
use crate::data::Sample;
use crate::error::Result;
use crate::rng;

/// Gradient estimate from loss evaluations alone. Every evaluation replays
/// the same random stream, so stochastic objectives are held fixed.
pub fn finite_difference_grad(
    objective: &dyn Objective,
    params: &ParamVector,
    batch: &[&Sample],
    seed: u64,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let up = objective.loss(&probe, batch, &mut rng::stream(seed, &[]))?;
        probe.values[i] = orig - step;
        let down = objective.loss(&probe, batch, &mut rng::stream(seed, &[]))?;
        probe.values[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error <= tolerance
    }
}

/// Compares the analytic gradient with finite differences on every
/// coordinate whose analytic magnitude exceeds `min_magnitude`.
pub fn check_gradient(
    objective: &dyn Objective,
    params: &ParamVector,
    batch: &[&Sample],
    seed: u64,
    step: f64,
    min_magnitude: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.loss_and_grad(params, batch, &mut rng::stream(seed, &[]))?;
    let numeric = finite_difference_grad(objective, params, batch, seed, step)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: None,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.abs() <= min_magnitude {
            continue;
        }
        report.checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Per-round multiplicative learning-rate decay; 1.0 keeps it constant.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_decay() -> f64 {
    1.0
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            betas: default_betas(),
            eps: default_eps(),
            lr_decay: 1.0,
        }
    }

    pub fn adam(learning_rate: f64, betas: (f64, f64)) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            betas,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        Ok(())
    }

    /// Learning rate used in (zero-based) round `round`.
    pub fn rate_for_round(&self, round: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(round as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One in-place update of `params`.
///
/// SGD follows the heavy-ball form `b ← μ·b + (g + λθ)`, `θ ← θ − η·b`.
/// Adam adds weight decay to the gradient; AdamW decays the weights directly.
pub fn optimizer_step(
    params: &mut ParamVector,
    grad: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    learning_rate: f64,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient",
            expected: params.len(),
            found: grad.len(),
        });
    }
    let n = params.len();
    if state.first.len() != n {
        state.first = vec![0.0; n];
        state.second = vec![0.0; n];
        state.step = 0;
    }
    state.step += 1;
    let wd = config.weight_decay;
    match config.kind {
        OptimizerKind::Sgd => {
            for i in 0..n {
                let g = grad[i] + wd * params.values[i];
                let update = if config.momentum > 0.0 {
                    state.first[i] = config.momentum * state.first[i] + g;
                    state.first[i]
                } else {
                    g
                };
                params.values[i] -= learning_rate * update;
            }
        }
        OptimizerKind::Adam | OptimizerKind::Adamw => {
            let (b1, b2) = config.betas;
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decoupled = config.kind == OptimizerKind::Adamw;
            for i in 0..n {
                let g = if decoupled {
                    grad[i]
                } else {
                    grad[i] + wd * params.values[i]
                };
                state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
                state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
                let m = state.first[i] / c1;
                let v = state.second[i] / c2;
                if decoupled {
                    params.values[i] -= learning_rate * wd * params.values[i];
                }
                params.values[i] -= learning_rate * m / (v.sqrt() + config.eps);
            }
        }
    }
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optimizer update"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamVector {
        let mut p = ParamVector::zeros(&[("x".into(), 1)]);
        p.values[0] = v;
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar(1.0);
        let cfg = OptimizerConfig::sgd(0.1);
        optimizer_step(&mut p, &[2.0], &mut OptimizerState::new(), &cfg, 0.1).unwrap();
        assert!((p.values[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for cfg in [
            OptimizerConfig::sgd(0.1),
            OptimizerConfig::adam(0.1, (0.5, 0.9)),
            OptimizerConfig::adamw(0.1, 0.0),
        ] {
            let mut p = scalar(1.5);
            let mut st = OptimizerState::new();
            for _ in 0..3 {
                optimizer_step(&mut p, &[0.0], &mut st, &cfg, cfg.learning_rate).unwrap();
            }
            assert_eq!(p.values[0], 1.5);
        }
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        // b1 = g, b2 = 0.9 g + g; displacement = η (b1 + b2) = 2.9 η g.
        let mut cfg = OptimizerConfig::sgd(0.1);
        cfg.momentum = 0.9;
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new();
        optimizer_step(&mut p, &[1.0], &mut st, &cfg, 0.1).unwrap();
        optimizer_step(&mut p, &[1.0], &mut st, &cfg, 0.1).unwrap();
        assert!((p.values[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig::adam(0.01, (0.9, 0.999));
        let mut p = scalar(1.0);
        optimizer_step(&mut p, &[3.0], &mut OptimizerState::new(), &cfg, 0.01).unwrap();
        assert!((p.values[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adamw_decays_weights_directly() {
        let cfg = OptimizerConfig::adamw(0.1, 0.5);
        let mut p = scalar(2.0);
        optimizer_step(&mut p, &[0.0], &mut OptimizerState::new(), &cfg, 0.1).unwrap();
        assert!((p.values[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn decay_schedule() {
        let mut cfg = OptimizerConfig::sgd(1.0);
        cfg.lr_decay = 0.5;
        assert_eq!(cfg.rate_for_round(0), 1.0);
        assert_eq!(cfg.rate_for_round(3), 0.125);
    }
}

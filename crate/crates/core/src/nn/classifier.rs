use super::mlp::{Mlp, MlpSpec};
use super::params::ParamVector;
use super::Objective;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CLASSIFIER_PREFIX: &str = "clf";

pub fn classifier_segments(spec: &MlpSpec) -> Vec<(String, usize)> {
    spec.segments(CLASSIFIER_PREFIX)
}

pub fn init_classifier(spec: &MlpSpec, rng: &mut Rng) -> Result<ParamVector> {
    spec.validate()?;
    let mut params = ParamVector::zeros(&classifier_segments(spec));
    spec.init_into(CLASSIFIER_PREFIX, &mut params, rng)?;
    Ok(params)
}

/// Logits of the classifier for one feature vector.
pub fn classifier_forward(params: &ParamVector, spec: &MlpSpec, features: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::bind(spec, CLASSIFIER_PREFIX, params)?;
    if features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "classifier input",
            expected: spec.input_dim,
            found: features.len(),
        });
    }
    Ok(mlp.forward(&params.values, features))
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of one example.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Loss and d(loss)/d(logits).
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, label)?;
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy of the classifier over labeled samples.
#[derive(Debug, Clone)]
pub struct ClassifierObjective {
    pub spec: MlpSpec,
}

impl ClassifierObjective {
    pub fn new(spec: MlpSpec) -> Self {
        Self { spec }
    }
}

impl Objective for ClassifierObjective {
    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
        _rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("classifier batch"));
        }
        let mlp = Mlp::bind(&self.spec, CLASSIFIER_PREFIX, params)?;
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for s in batch {
            let label = s
                .label()
                .ok_or_else(|| Error::invalid("classifier training needs labeled samples"))?;
            let (logits, trace) = mlp.forward_traced(&params.values, &s.features_f64());
            let (loss, mut g) = cross_entropy_with_grad(&logits, label)?;
            total += loss;
            g.iter_mut().for_each(|v| *v *= scale);
            mlp.backward(&params.values, &trace, &g, &mut grad);
        }
        Ok((total * scale, grad))
    }

    fn loss(&self, params: &ParamVector, batch: &[&Sample], _rng: &mut Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("classifier batch"));
        }
        let mlp = Mlp::bind(&self.spec, CLASSIFIER_PREFIX, params)?;
        let mut total = 0.0;
        for s in batch {
            let label = s
                .label()
                .ok_or_else(|| Error::invalid("classifier training needs labeled samples"))?;
            total += cross_entropy(&mlp.forward(&params.values, &s.features_f64()), label)?;
        }
        Ok(total / batch.len() as f64)
    }
}

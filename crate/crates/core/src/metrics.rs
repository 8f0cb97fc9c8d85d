//! Evaluation metrics. This is the only module that reads hidden labels for
//! scoring; training code never calls into it.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RevealScope};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, ParamVector};
use crate::pseudo::{local_confusion, ConfusionMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn macro_precision(&self) -> f64 {
        mean(&self.precision)
    }

    pub fn macro_recall(&self) -> f64 {
        mean(&self.recall)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Metrics from a confusion matrix. Classes never predicted (or never
/// present) get precision (recall) 0.
pub fn metrics_from_confusion(confusion: &ConfusionMatrix) -> Result<Evaluation> {
    let total = confusion.total();
    if !(total > 0.0) {
        return Err(Error::Empty("evaluation set"));
    }
    let c = confusion.classes();
    let correct: f64 = (0..c).map(|i| confusion.get(i, i)).sum();
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(Evaluation {
        accuracy: correct / total,
        precision: (0..c)
            .map(|j| ratio(confusion.get(j, j), confusion.column_sum(j)))
            .collect(),
        recall: (0..c)
            .map(|i| ratio(confusion.get(i, i), confusion.row_sum(i)))
            .collect(),
        confusion: confusion.clone(),
    })
}

/// Accuracy, per-class precision/recall and confusion on a labeled test set.
pub fn evaluate(params: &ParamVector, spec: &MlpSpec, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    metrics_from_confusion(&local_confusion(params, spec, test)?)
}

/// Opens a hidden-label reveal scope on this thread.
pub(crate) fn reveal(reason: &str) -> RevealScope {
    RevealScope::open(reason)
}

/// True-vs-assigned confusion of a pseudo-labeled set, using the hidden
/// ground truth.
pub fn empirical_pseudo_confusion(pseudo: &Dataset) -> Result<ConfusionMatrix> {
    let _scope = reveal("pseudo-label precision");
    let mut m = ConfusionMatrix::zeros(pseudo.num_classes);
    for s in &pseudo.samples {
        let truth = s
            .hidden_label()?
            .ok_or_else(|| Error::invalid("pseudo sample without ground truth"))?;
        let assigned = s
            .label()
            .ok_or_else(|| Error::invalid("pseudo sample without a label"))?;
        m.add(truth, assigned, 1.0);
    }
    Ok(m)
}

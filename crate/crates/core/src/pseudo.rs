//! Pseudo-labeling and the confusion-matrix protocol: local test confusions,
//! server-side aggregation and per-client estimation of the pseudo-label
//! confusion matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::{argmax, Mlp, MlpSpec, ParamVector, CLASSIFIER_PREFIX};

/// `C × C` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0.0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.len();
        let mut m = Self::zeros(classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::DimensionMismatch {
                    context: "confusion row",
                    expected: classes,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("confusion entry ({i},{j}) = {v}")));
                }
                m.counts[i * classes + j] = v;
            }
        }
        Ok(m)
    }

    /// Diagonal matrix: the confusion of a correctly labeled set.
    pub fn diagonal(counts: &[f64]) -> Self {
        let mut m = Self::zeros(counts.len());
        for (i, &c) in counts.iter().enumerate() {
            m.set(i, i, c);
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> f64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn set(&mut self, true_class: usize, predicted: usize, value: f64) {
        self.counts[true_class * self.classes + predicted] = value;
    }

    pub fn add(&mut self, true_class: usize, predicted: usize, value: f64) {
        self.counts[true_class * self.classes + predicted] += value;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.counts.chunks(self.classes.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.classes).map(|i| self.get(i, j)).collect()
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            classes: self.classes,
            counts: self.counts.iter().map(|v| v * factor).collect(),
        }
    }

    fn ensure_same_size(&self, other: &Self) -> Result<()> {
        if self.classes == other.classes {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context: "confusion matrix classes",
                expected: self.classes,
                found: other.classes,
            })
        }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_size(other)?;
        Ok(Self {
            classes: self.classes,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    /// Replaces every all-zero column with a uniform distribution of unit
    /// mass. Returns the columns that were filled.
    pub fn fill_empty_columns_uniform(&self) -> (Self, Vec<usize>) {
        let mut out = self.clone();
        let mut filled = Vec::new();
        for j in 0..self.classes {
            if self.column_sum(j) == 0.0 {
                for i in 0..self.classes {
                    out.set(i, j, 1.0 / self.classes as f64);
                }
                filled.push(j);
            }
        }
        (out, filled)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        for row in self.rows() {
            writer.serialize(row)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        let rows = reader
            .deserialize::<Vec<f64>>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_rows(&rows)
    }
}

/// Number of samples pseudo-labeled into each class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelCounts {
    pub counts: Vec<usize>,
}

impl PseudoLabelCounts {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            counts: dataset.class_counts(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn predictions(params: &ParamVector, spec: &MlpSpec, data: &Dataset) -> Result<Vec<usize>> {
    if data.dim != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "classifier input",
            expected: spec.input_dim,
            found: data.dim,
        });
    }
    let mlp = Mlp::bind(spec, CLASSIFIER_PREFIX, params)?;
    Ok(data
        .samples
        .iter()
        .map(|s| argmax(&mlp.forward(&params.values, &s.features_f64())))
        .collect())
}

/// Labels every unlabeled sample with the classifier's argmax; hidden ground
/// truth is carried along untouched.
pub fn pseudo_label(params: &ParamVector, spec: &MlpSpec, unlabeled: &Dataset) -> Result<Dataset> {
    if let Some(s) = unlabeled
        .samples
        .iter()
        .find(|s| s.provenance != Provenance::Unlabeled)
    {
        return Err(Error::invalid(format!(
            "pseudo-labeling expects unlabeled samples, found {}",
            s.provenance.as_str()
        )));
    }
    let predicted = predictions(params, spec, unlabeled)?;
    let mut out = unlabeled.clone();
    out.name = format!("{}_pseudo", unlabeled.name);
    for (s, y) in out.samples.iter_mut().zip(predicted) {
        s.relabel(y, Provenance::Pseudo);
    }
    Ok(out)
}

/// Confusion of the classifier on a labeled test set.
pub fn local_confusion(params: &ParamVector, spec: &MlpSpec, test: &Dataset) -> Result<ConfusionMatrix> {
    let predicted = predictions(params, spec, test)?;
    let mut m = ConfusionMatrix::zeros(test.num_classes);
    for (s, y) in test.samples.iter().zip(predicted) {
        let truth = s
            .label()
            .ok_or_else(|| Error::invalid("confusion needs a labeled test set"))?;
        if y >= test.num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: test.num_classes,
            });
        }
        m.add(truth, y, 1.0);
    }
    Ok(m)
}

/// Elementwise sum of client confusions (server side).
pub fn aggregate_confusions(matrices: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let first = matrices.first().ok_or(Error::Empty("confusion list"))?;
    matrices[1..]
        .iter()
        .try_fold(first.clone(), |acc, m| acc.try_add(m))
}

/// Scales each column of the global test confusion to the number of samples
/// pseudo-labeled into that column.
pub fn estimate_pseudo_confusion(
    global_test: &ConfusionMatrix,
    counts: &PseudoLabelCounts,
) -> Result<ConfusionMatrix> {
    let c = global_test.classes();
    if counts.counts.len() != c {
        return Err(Error::DimensionMismatch {
            context: "pseudo-label counts",
            expected: c,
            found: counts.counts.len(),
        });
    }
    let mut out = ConfusionMatrix::zeros(c);
    for (j, &n) in counts.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let col_sum = global_test.column_sum(j);
        if !(col_sum > 0.0) {
            return Err(Error::InsufficientCoverage {
                column: j,
                pseudo_count: n,
            });
        }
        for i in 0..c {
            out.set(i, j, global_test.get(i, j) / col_sum * n as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    #[test]
    fn eq5_hand_column() {
        let mg = ConfusionMatrix::from_rows(&[vec![90.0, 5.0], vec![10.0, 45.0]]).unwrap();
        let counts = PseudoLabelCounts { counts: vec![20, 0] };
        let mp = estimate_pseudo_confusion(&mg, &counts).unwrap();
        assert!((mp.get(0, 0) - 18.0).abs() < 1e-9);
        assert!((mp.get(1, 0) - 2.0).abs() < 1e-9);
        assert_eq!(mp.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn diagonal_propagates() {
        let mg = ConfusionMatrix::diagonal(&[3.0, 7.0, 1.0]);
        let counts = PseudoLabelCounts { counts: vec![4, 9, 2] };
        let mp = estimate_pseudo_confusion(&mg, &counts).unwrap();
        assert_eq!(mp, ConfusionMatrix::diagonal(&[4.0, 9.0, 2.0]));
    }

    #[test]
    fn uncovered_column_is_an_error() {
        let mg = ConfusionMatrix::from_rows(&[vec![5.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let counts = PseudoLabelCounts { counts: vec![1, 3] };
        assert!(matches!(
            estimate_pseudo_confusion(&mg, &counts),
            Err(Error::InsufficientCoverage { column: 1, pseudo_count: 3 })
        ));
        let (filled, cols) = mg.fill_empty_columns_uniform();
        assert_eq!(cols, vec![1]);
        let mp = estimate_pseudo_confusion(&filled, &counts).unwrap();
        assert_eq!(mp.column(1), vec![1.5, 1.5]);
    }

    #[test]
    fn aggregation_sums() {
        let a = ConfusionMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = ConfusionMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(aggregate_confusions(std::slice::from_ref(&a)).unwrap(), a);
        let s = aggregate_confusions(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.rows(), vec![vec![1.0, 3.0], vec![4.0, 4.0]]);
        assert_eq!(s.total(), a.total() + b.total());
        assert!(aggregate_confusions(&[a, ConfusionMatrix::zeros(3)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = ConfusionMatrix::from_rows(&[vec![1.5, 0.0], vec![2.0, 4.25]]).unwrap();
        m.write_csv(&path).unwrap();
        assert_eq!(ConfusionMatrix::read_csv(&path).unwrap(), m);
    }

    #[test]
    fn pseudo_label_rejects_labeled_input() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output_dim: 2,
            activation: crate::nn::Activation::Relu,
        };
        let params = ParamVector::zeros(&spec.segments(CLASSIFIER_PREFIX));
        let ds = Dataset::from_samples("l", 2, 1, vec![Sample::labeled(vec![0.0], 1)]).unwrap();
        assert!(pseudo_label(&params, &spec, &ds).is_err());
        let empty = Dataset::new("u", 2, 1);
        assert!(pseudo_label(&params, &spec, &empty).unwrap().is_empty());
    }
}

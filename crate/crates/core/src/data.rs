//! Datasets, synthetic worlds, non-IID partitioning and splitting.
//!
//! Unlabeled samples keep their true label in a hidden slot. It can only be
//! read while a [`RevealScope`] is alive on the current thread; training code
//! never opens one, so any accidental read fails loudly and is counted.

use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Labeled,
    Unlabeled,
    Pseudo,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Labeled => "labeled",
            Provenance::Unlabeled => "unlabeled",
            Provenance::Pseudo => "pseudo",
            Provenance::Synthetic => "synthetic",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "labeled" => Provenance::Labeled,
            "unlabeled" => Provenance::Unlabeled,
            "pseudo" => Provenance::Pseudo,
            "synthetic" => Provenance::Synthetic,
            other => {
                return Err(Error::MalformedManifest(format!(
                    "unknown provenance `{other}`"
                )))
            }
        })
    }
}

thread_local! {
    static REVEAL_DEPTH: Cell<usize> = const { Cell::new(0) };
}

static DENIED_READS: AtomicUsize = AtomicUsize::new(0);

/// While alive, hidden labels may be read on this thread.
#[must_use = "hidden labels are only readable while the scope is held"]
pub struct RevealScope {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl RevealScope {
    pub(crate) fn open(reason: &str) -> Self {
        log::trace!("revealing hidden labels: {reason}");
        REVEAL_DEPTH.with(|d| d.set(d.get() + 1));
        RevealScope {
            _not_send: std::marker::PhantomData,
        }
    }
}

impl Drop for RevealScope {
    fn drop(&mut self) {
        REVEAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Number of hidden-label reads refused so far in this process.
pub fn denied_hidden_reads() -> usize {
    DENIED_READS.load(Ordering::SeqCst)
}

fn reveal_active() -> bool {
    REVEAL_DEPTH.with(|d| d.get() > 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    label: Option<usize>,
    hidden_label: Option<usize>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn labeled(features: Vec<f32>, label: usize) -> Self {
        Self {
            features,
            label: Some(label),
            hidden_label: None,
            provenance: Provenance::Labeled,
        }
    }

    pub fn with_provenance(features: Vec<f32>, label: usize, provenance: Provenance) -> Self {
        debug_assert!(provenance != Provenance::Unlabeled);
        Self {
            features,
            label: Some(label),
            hidden_label: None,
            provenance,
        }
    }

    /// An unlabeled sample whose true label (if known) is kept hidden.
    pub fn unlabeled(features: Vec<f32>, hidden_label: Option<usize>) -> Self {
        Self {
            features,
            label: None,
            hidden_label,
            provenance: Provenance::Unlabeled,
        }
    }

    /// The visible label: the true label for labeled data, the assigned
    /// label for pseudo/synthetic data, `None` for unlabeled data.
    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn has_hidden_label(&self) -> bool {
        self.hidden_label.is_some()
    }

    /// Ground truth kept for evaluation. Fails outside a reveal scope.
    pub fn hidden_label(&self) -> Result<Option<usize>> {
        if !reveal_active() {
            DENIED_READS.fetch_add(1, Ordering::SeqCst);
            return Err(Error::HiddenLabelAccess);
        }
        Ok(self.hidden_label)
    }

    /// Visible label, falling back to the hidden one (needs a reveal scope
    /// when the sample is unlabeled).
    pub fn true_class(&self) -> Result<Option<usize>> {
        match self.provenance {
            Provenance::Labeled => Ok(self.label),
            _ => self.hidden_label(),
        }
    }

    /// Replaces the visible label, keeping any hidden ground truth.
    pub(crate) fn relabel(&mut self, label: usize, provenance: Provenance) {
        if self.provenance == Provenance::Labeled && self.hidden_label.is_none() {
            self.hidden_label = self.label;
        }
        self.label = Some(label);
        self.provenance = provenance;
    }

    pub(crate) fn strip_label(&mut self) {
        if self.label.is_some() {
            self.hidden_label = self.label.take();
        }
        self.provenance = Provenance::Unlabeled;
    }

    /// Turns the hidden label into a visible one (oracle baselines only).
    pub(crate) fn reveal_as_labeled(&self) -> Result<Sample> {
        let label = self
            .true_class()?
            .ok_or_else(|| Error::invalid("sample has no ground-truth label"))?;
        Ok(Sample::labeled(self.features.clone(), label))
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            num_classes,
            dim,
            samples: Vec::new(),
        }
    }

    pub fn from_samples(
        name: impl Into<String>,
        num_classes: usize,
        dim: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_classes,
            dim,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("dataset must have at least one class"));
        }
        for s in &self.samples {
            if s.features.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: "sample features",
                    expected: self.dim,
                    found: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            for l in s.label.iter().chain(s.hidden_label.iter()) {
                if *l >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: *l,
                        classes: self.num_classes,
                    });
                }
            }
            if (s.provenance == Provenance::Unlabeled) == s.label.is_some() {
                return Err(Error::invalid(
                    "label must be present iff provenance is not unlabeled",
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, no samples.
    pub fn empty_like(&self, name: impl Into<String>) -> Self {
        Self::new(name, self.num_classes, self.dim)
    }

    /// Per-class counts of the visible labels.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in self.samples.iter().filter_map(Sample::label) {
            counts[l] += 1;
        }
        counts
    }

    pub fn extend_from(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                context: "dataset concatenation",
                expected: self.dim,
                found: other.dim,
            });
        }
        if other.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch {
                context: "dataset classes",
                expected: self.num_classes,
                found: other.num_classes,
            });
        }
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }

    fn subset(&self, name: &str, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.to_string(),
            num_classes: self.num_classes,
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Indices grouped by true class; unlabeled samples need a reveal scope.
    fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            let c = s
                .true_class()?
                .ok_or_else(|| Error::invalid("sample without any class information"))?;
            by_class[c].push(i);
        }
        Ok(by_class)
    }
}

/// Draws `C · per_class_n` samples, class `c` from `N(means[c], sigma² I)`.
pub fn make_gaussian_mixture(
    num_classes: usize,
    per_class_n: usize,
    means: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if means.len() != num_classes {
        return Err(Error::DimensionMismatch {
            context: "mixture means",
            expected: num_classes,
            found: means.len(),
        });
    }
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let dim = means[0].len();
    if let Some(bad) = means.iter().find(|m| m.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: "mixture means",
            expected: dim,
            found: bad.len(),
        });
    }
    let mut rng = rng::stream(seed, &[rng::tag("gaussian_mixture")]);
    let mut samples = Vec::with_capacity(num_classes * per_class_n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class_n {
            let features = mean
                .iter()
                .map(|&m| (m + sigma * rng::normal(&mut rng)) as f32)
                .collect();
            samples.push(Sample::labeled(features, c));
        }
    }
    Dataset::from_samples("gaussian_mixture", num_classes, dim, samples)
}

/// `C` means evenly spaced on a circle of the given radius (2-D).
pub fn circle_means(num_classes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SplitMode {
    Iid,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub test_fraction: f64,
    pub label_mode: SplitMode,
    pub unlabeled_mode: SplitMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            gamma: 0.1,
            lambda: 0.1,
            test_fraction: 0.2,
            label_mode: SplitMode::Dir,
            unlabeled_mode: SplitMode::Dir,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights`, preserving
/// the total exactly. Ties in the fractional parts go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    let mut k = 0;
    while remaining > 0 {
        out[order[k % order.len()]] += 1;
        remaining -= 1;
        k += 1;
    }
    out
}

fn dirichlet(rng: &mut Rng, concentration: f64, len: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration checked positive");
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|d| d / sum).collect()
    } else {
        // Every gamma draw underflowed; fall back to a single random owner.
        let mut out = vec![0.0; len];
        out[rng::uniform_inclusive(rng, 0, len - 1)] = 1.0;
        out
    }
}

/// Splits a dataset over `clients`.
///
/// Each class is distributed independently: `Dir` mode draws the class's
/// share per client from `Dir(gamma)`, `Iid` mode shares it uniformly. Counts
/// come from largest-remainder rounding, so every sample lands in exactly one
/// partition. Within a partition, samples keep their input order. Unlabeled
/// inputs are grouped by their hidden labels and need a reveal scope.
pub fn dirichlet_partition(
    dataset: &Dataset,
    clients: usize,
    gamma: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if clients > dataset.len() {
        return Err(Error::invalid(format!(
            "{clients} clients requested for only {} samples",
            dataset.len()
        )));
    }
    if mode == SplitMode::Dir && !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    let by_class = dataset.indices_by_class()?;
    let mut rng = rng::stream(seed, &[rng::tag("partition")]);
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (c, members) in by_class.into_iter().enumerate() {
        let mut members = members;
        let counts = match mode {
            SplitMode::Dir => {
                let shares = dirichlet(&mut rng, gamma, clients);
                largest_remainder(&shares, members.len())
            }
            SplitMode::Iid => {
                // Rotate who receives the remainder so no client is favoured.
                let base = members.len() / clients;
                let extra = members.len() % clients;
                let mut counts = vec![base; clients];
                for j in 0..extra {
                    counts[(c + j) % clients] += 1;
                }
                counts
            }
        };
        members.shuffle(&mut rng);
        let mut start = 0;
        for (k, &n) in counts.iter().enumerate() {
            owned[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    Ok(owned
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            dataset.subset(&format!("{}_client{k}", dataset.name), &idx)
        })
        .collect())
}

/// Splits off `round(λ·n)` labeled samples; the rest lose their labels (kept
/// hidden for evaluation).
pub fn labeled_split(dataset: &Dataset, lambda: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if dataset.samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::invalid("labeled_split needs a fully labeled dataset"));
    }
    let n = dataset.len();
    let n_labeled = ((lambda * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("labeled_split")]));
    let mut is_labeled = vec![false; n];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let mut labeled = dataset.empty_like(format!("{}_labeled", dataset.name));
    let mut unlabeled = dataset.empty_like(format!("{}_unlabeled", dataset.name));
    for (s, keep) in dataset.samples.iter().zip(is_labeled) {
        if keep {
            labeled.samples.push(s.clone());
        } else {
            let mut u = s.clone();
            u.strip_label();
            unlabeled.samples.push(u);
        }
    }
    Ok((labeled, unlabeled))
}

#[derive(Debug, Clone, Copy)]
pub struct HoldoutOptions {
    /// Put at least one sample of every class with two or more members into
    /// the test split.
    pub min_one_per_class: bool,
}

impl Default for HoldoutOptions {
    fn default() -> Self {
        Self {
            min_one_per_class: true,
        }
    }
}

/// Stratified holdout: `round(f·n_c)` test samples per class.
pub fn holdout_test_split(
    labeled: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    holdout_test_split_with(labeled, test_fraction, seed, HoldoutOptions::default())
}

pub fn holdout_test_split_with(
    labeled: &Dataset,
    test_fraction: f64,
    seed: u64,
    options: HoldoutOptions,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if labeled.is_empty() {
        return Err(Error::Empty("holdout split of an empty dataset"));
    }
    let by_class = labeled.indices_by_class()?;
    let mut rng = rng::stream(seed, &[rng::tag("holdout")]);
    let mut in_test = vec![false; labeled.len()];
    for members in by_class {
        let mut members = members;
        let n = members.len();
        let mut n_test = (test_fraction * n as f64).round() as usize;
        if options.min_one_per_class && n >= 2 {
            n_test = n_test.max(1);
        }
        members.shuffle(&mut rng);
        for &i in &members[..n_test.min(n)] {
            in_test[i] = true;
        }
    }
    let mut train = labeled.empty_like(format!("{}_train", labeled.name));
    let mut test = labeled.empty_like(format!("{}_test", labeled.name));
    for (s, t) in labeled.samples.iter().zip(in_test) {
        if t {
            test.samples.push(s.clone());
        } else {
            train.samples.push(s.clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    #[serde(rename = "C")]
    num_classes: usize,
    d: usize,
    n: usize,
    dtype: String,
    labels: Vec<i64>,
    provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_labels: Option<Vec<i64>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";

/// Writes `manifest.json` and `features.bin` (row-major little-endian f32)
/// into `dir`, creating it if needed. Absent labels are written as -1.
pub fn save_dataset_file(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let any_hidden = dataset.samples.iter().any(Sample::has_hidden_label);
    let manifest = Manifest {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        d: dataset.dim,
        n: dataset.len(),
        dtype: "f32le".into(),
        labels: dataset
            .samples
            .iter()
            .map(|s| s.label.map_or(-1, |l| l as i64))
            .collect(),
        provenance: dataset
            .samples
            .iter()
            .map(|s| s.provenance.as_str().to_string())
            .collect(),
        hidden_labels: any_hidden.then(|| {
            dataset
                .samples
                .iter()
                .map(|s| s.hidden_label.map_or(-1, |l| l as i64))
                .collect()
        }),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let mut bytes = Vec::with_capacity(dataset.len() * dataset.dim * 4);
    for s in &dataset.samples {
        for v in &s.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(FEATURES_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn parse_label(raw: i64, classes: usize) -> Result<Option<usize>> {
    match raw {
        -1 => Ok(None),
        l if l < -1 => Err(Error::MalformedManifest(format!("negative label {l}"))),
        l if l as usize >= classes => Err(Error::LabelOutOfRange {
            label: l as usize,
            classes,
        }),
        l => Ok(Some(l as usize)),
    }
}

/// Reads a dataset written by [`save_dataset_file`].
pub fn load_dataset_file(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(Error::MalformedManifest(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    if manifest.num_classes == 0 {
        return Err(Error::MalformedManifest("C must be positive".into()));
    }
    if manifest.labels.len() != manifest.n || manifest.provenance.len() != manifest.n {
        return Err(Error::MalformedManifest(format!(
            "n = {} but {} labels and {} provenance tags",
            manifest.n,
            manifest.labels.len(),
            manifest.provenance.len()
        )));
    }
    if let Some(h) = &manifest.hidden_labels {
        if h.len() != manifest.n {
            return Err(Error::MalformedManifest("hidden_labels length differs from n".into()));
        }
    }
    let path = dir.join(FEATURES_FILE);
    let payload = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest.n * manifest.d * 4;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let features = payload[i * manifest.d * 4..(i + 1) * manifest.d * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let provenance = Provenance::parse(&manifest.provenance[i])?;
        let label = parse_label(manifest.labels[i], manifest.num_classes)?;
        let hidden_label = match &manifest.hidden_labels {
            Some(h) => parse_label(h[i], manifest.num_classes)?,
            None => None,
        };
        samples.push(Sample {
            features,
            label,
            hidden_label,
            provenance,
        });
    }
    Dataset::from_samples(manifest.name, manifest.num_classes, manifest.d, samples)
        .map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::MalformedManifest(msg),
            other => other,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed(n: usize, classes: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample::labeled(vec![i as f32], i % classes))
            .collect();
        Dataset::from_samples("indexed", classes, 1, samples).unwrap()
    }

    fn ids(ds: &Dataset) -> Vec<usize> {
        ds.samples.iter().map(|s| s.features[0] as usize).collect()
    }

    #[test]
    fn zero_variance_mixture_is_exact() {
        let means = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let ds = make_gaussian_mixture(2, 50, &means, 0.0, 3).unwrap();
        assert_eq!(ds.len(), 100);
        for s in &ds.samples {
            let m = &means[s.label().unwrap()];
            assert_eq!(s.features, vec![m[0] as f32, m[1] as f32]);
        }
    }

    #[test]
    fn mixture_is_deterministic() {
        let means = circle_means(3, 1.0);
        let a = make_gaussian_mixture(3, 20, &means, 0.4, 11).unwrap();
        let b = make_gaussian_mixture(3, 20, &means, 0.4, 11).unwrap();
        assert_eq!(a, b);
        let c = make_gaussian_mixture(3, 20, &means, 0.4, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_empirical_means_within_standard_error() {
        let means = circle_means(4, 1.0);
        let ds = make_gaussian_mixture(4, 100, &means, 0.5, 5).unwrap();
        let bound = 3.0 * 0.5 / 10.0;
        for c in 0..4 {
            for j in 0..2 {
                let vals: Vec<f64> = ds
                    .samples
                    .iter()
                    .filter(|s| s.label() == Some(c))
                    .map(|s| f64::from(s.features[j]))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((mean - means[c][j]).abs() <= bound, "class {c} coord {j}: {mean}");
            }
        }
    }

    #[test]
    fn mixture_rejects_ragged_means() {
        let err = make_gaussian_mixture(2, 3, &[vec![0.0, 0.0], vec![1.0]], 1.0, 0);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_client_partition_is_identity() {
        let ds = indexed(30, 3);
        for mode in [SplitMode::Iid, SplitMode::Dir] {
            let parts = dirichlet_partition(&ds, 1, 0.1, mode, 9).unwrap();
            assert_eq!(parts.len(), 1);
            assert_eq!(parts[0].samples, ds.samples);
        }
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let ds = indexed(3, 3);
        assert!(dirichlet_partition(&ds, 4, 1.0, SplitMode::Dir, 0).is_err());
    }

    #[test]
    fn iid_partition_spreads_each_class_evenly() {
        let ds = indexed(400, 4);
        let parts = dirichlet_partition(&ds, 5, 1.0, SplitMode::Iid, 1).unwrap();
        for p in &parts {
            assert_eq!(p.class_counts(), vec![20; 4]);
        }
    }

    #[test]
    fn huge_gamma_matches_global_proportions() {
        let ds = indexed(4000, 4);
        for seed in 0..10 {
            let parts = dirichlet_partition(&ds, 5, 1e6, SplitMode::Dir, seed).unwrap();
            for p in &parts {
                let counts = p.class_counts();
                for &n in &counts {
                    let prop = n as f64 / p.len() as f64;
                    assert!((prop - 0.25).abs() <= 0.02, "seed {seed}: {counts:?}");
                }
            }
        }
    }

    #[test]
    fn heterogeneity_shrinks_as_gamma_grows() {
        let ds = indexed(4000, 4);
        let deviation = |gamma: f64| {
            let mut total = 0.0;
            for seed in 0..10 {
                let parts = dirichlet_partition(&ds, 5, gamma, SplitMode::Dir, seed).unwrap();
                let mut worst: f64 = 0.0;
                for p in parts.iter().filter(|p| !p.is_empty()) {
                    for n in p.class_counts() {
                        worst = worst.max((n as f64 / p.len() as f64 - 0.25).abs());
                    }
                }
                total += worst;
            }
            total / 10.0
        };
        let devs: Vec<f64> = [0.1, 1.0, 100.0, 1e6].iter().map(|&g| deviation(g)).collect();
        for w in devs.windows(2) {
            assert!(w[0] > w[1], "{devs:?}");
        }
    }

    #[test]
    fn unlabeled_partition_needs_reveal() {
        let (_, unlabeled) = labeled_split(&indexed(40, 2), 0.0, 1).unwrap();
        let err = dirichlet_partition(&unlabeled, 2, 1.0, SplitMode::Dir, 0);
        assert!(matches!(err, Err(Error::HiddenLabelAccess)));
        let _scope = RevealScope::open("test");
        let parts = dirichlet_partition(&unlabeled, 2, 1.0, SplitMode::Dir, 0).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 40);
        assert!(parts[0].samples.iter().all(|s| s.label().is_none()));
    }

    #[test]
    fn labeled_split_counts() {
        let ds = indexed(100, 4);
        let (l, u) = labeled_split(&ds, 1.0, 0).unwrap();
        assert_eq!((l.len(), u.len()), (100, 0));
        let (l, u) = labeled_split(&ds, 0.1, 0).unwrap();
        assert_eq!((l.len(), u.len()), (10, 90));
        assert!(u.samples.iter().all(|s| s.label().is_none()
            && s.provenance == Provenance::Unlabeled
            && s.has_hidden_label()));
        let (l, u) = labeled_split(&ds, 0.0, 0).unwrap();
        assert_eq!((l.len(), u.len()), (0, 100));
        let mut all: Vec<usize> = ids(&l).into_iter().chain(ids(&u)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn hidden_label_guard_counts_denials() {
        let s = Sample::unlabeled(vec![0.0], Some(1));
        let before = denied_hidden_reads();
        assert!(s.hidden_label().is_err());
        assert!(denied_hidden_reads() > before);
        let scope = RevealScope::open("test");
        assert_eq!(s.hidden_label().unwrap(), Some(1));
        drop(scope);
        assert!(s.hidden_label().is_err());
    }

    #[test]
    fn holdout_is_stratified() {
        let ds = indexed(100, 4);
        let (train, test) = holdout_test_split(&ds, 0.2, 3).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(test.class_counts(), vec![5; 4]);
        assert_eq!(train.len(), 80);
    }

    #[test]
    fn holdout_min_rule() {
        let ds = indexed(12, 4);
        let (_, test) = holdout_test_split(&ds, 0.01, 3).unwrap();
        assert_eq!(test.class_counts(), vec![1; 4]);
        let opts = HoldoutOptions {
            min_one_per_class: false,
        };
        let (train, test) = holdout_test_split_with(&ds, 0.01, 3, opts).unwrap();
        assert!(test.is_empty());
        assert_eq!(train.len(), 12);
    }

    #[test]
    fn holdout_rejects_bad_fraction() {
        let ds = indexed(10, 2);
        assert!(holdout_test_split(&ds, 0.0, 0).is_err());
        assert!(holdout_test_split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let means = circle_means(3, 2.0);
        let ds = make_gaussian_mixture(3, 7, &means, 0.3, 2).unwrap();
        let (l, u) = labeled_split(&ds, 0.5, 1).unwrap();
        let mut mixed = l.clone();
        mixed.extend_from(&u).unwrap();
        save_dataset_file(&mixed, dir.path()).unwrap();
        let back = load_dataset_file(dir.path()).unwrap();
        assert_eq!(back, mixed);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset_file(&indexed(10, 2), dir.path()).unwrap();
        let path = dir.path().join(FEATURES_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_dataset_file(dir.path()),
            Err(Error::LengthMismatch { expected: 40, found: 37 })
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset_file(&indexed(3, 3), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["labels"][1] = serde_json::json!(3);
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(
            load_dataset_file(dir.path()),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn garbage_manifest_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{ not json").unwrap();
        assert!(matches!(
            load_dataset_file(dir.path()),
            Err(Error::MalformedManifest(_))
        ));
    }
}

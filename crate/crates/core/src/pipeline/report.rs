use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{save_dataset_file, Dataset};
use crate::error::{Error, Result};
use crate::fed::{append_rounds_csv, RoundTelemetry};
use crate::metrics::Evaluation;
use crate::nn::{save_checkpoint, ParamVector};
use crate::pseudo::ConfusionMatrix;
use crate::select::{write_trace_csv, TraceRow};
use crate::synth::{write_quota_json, QuotaRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: String,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PhaseMetrics {
    pub fn from_evaluation(phase: &str, e: &Evaluation) -> Self {
        Self {
            phase: phase.to_string(),
            accuracy: e.accuracy,
            macro_precision: e.macro_precision(),
            macro_recall: e.macro_recall(),
            precision: e.precision.clone(),
            recall: e.recall.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfusion {
    pub name: String,
    pub matrix: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBytes {
    pub phase: String,
    pub rounds: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl PhaseBytes {
    pub fn from_telemetry(phase: &str, rows: &[RoundTelemetry]) -> Self {
        Self {
            phase: phase.to_string(),
            rounds: rows.len(),
            bytes_up: rows.iter().map(|r| r.bytes_up).sum(),
            bytes_down: rows.iter().map(|r| r.bytes_down).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub labeled: usize,
    pub local_test: usize,
    pub unlabeled: usize,
    pub pseudo_labeled: usize,
    pub selected: usize,
    pub synthetic: usize,
    /// Kept proportion per pseudo class (all ones without selection).
    pub rho: Vec<f64>,
    pub selection_objective: Option<f64>,
    /// Global-test confusion columns that had no mass and were filled
    /// uniformly before estimating this client's pseudo confusion.
    pub filled_columns: Vec<usize>,
    pub alpha_requested: Option<f64>,
    pub alpha_realized: Option<f64>,
    pub targets: Vec<usize>,
    pub quotas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `ddsa_fssl`, `fedavg_labeled` or `fedavg_sl`.
    pub mode: String,
    /// True when hidden labels were revealed for training.
    pub oracle_mode: bool,
    pub seed: u64,
    pub final_accuracy: f64,
    pub phases: Vec<PhaseMetrics>,
    pub confusion: Vec<NamedConfusion>,
    pub clients: Vec<ClientSummary>,
    pub bytes: Vec<PhaseBytes>,
    pub final_params_checksum: u64,
    /// Loss terms of the autoencoder objective that are not implemented.
    pub excluded_losses: Vec<String>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn phase(&self, name: &str) -> Option<&PhaseMetrics> {
        self.phases.iter().find(|p| p.phase == name)
    }

    pub fn final_metrics(&self) -> Option<&PhaseMetrics> {
        self.phase(FINAL_PHASE)
    }

    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }

    pub fn mean_alpha_realized(&self) -> Option<f64> {
        let v: Vec<f64> = self.clients.iter().filter_map(|c| c.alpha_realized).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub const FINAL_PHASE: &str = "final";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const QUOTA_FILE: &str = "quota.json";
pub const CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    phase: String,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerClassRow {
    phase: String,
    class: usize,
    precision: f64,
    recall: f64,
}

/// Writes run artifacts under an optional root; every method is a no-op
/// when there is no root.
#[derive(Debug, Clone)]
pub struct Artifacts {
    root: Option<PathBuf>,
}

impl Artifacts {
    pub fn new(root: Option<&Path>) -> Result<Self> {
        if let Some(r) = root {
            fs::create_dir_all(r).map_err(|e| Error::io(r, e))?;
            let rounds = r.join(ROUNDS_FILE);
            if rounds.exists() {
                fs::remove_file(&rounds).map_err(|e| Error::io(&rounds, e))?;
            }
        }
        Ok(Self {
            root: root.map(Path::to_path_buf),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn path(&self, parts: &[&str]) -> Result<Option<PathBuf>> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let mut p = root.clone();
        for part in parts {
            p.push(part);
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(Some(p))
    }

    pub fn text(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(p) = self.path(&[name])? {
            fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn rounds(&self, rows: &[RoundTelemetry]) -> Result<()> {
        match self.path(&[ROUNDS_FILE])? {
            Some(p) => append_rounds_csv(&p, rows),
            None => Ok(()),
        }
    }

    pub fn confusion(&self, name: &str, m: &ConfusionMatrix) -> Result<()> {
        match self.path(&["confusion", &format!("{name}.csv")])? {
            Some(p) => m.write_csv(&p),
            None => Ok(()),
        }
    }

    pub fn params(&self, name: &str, params: &ParamVector) -> Result<()> {
        match self.path(&["params", name])? {
            Some(p) => save_checkpoint(params, &p),
            None => Ok(()),
        }
    }

    pub fn selection_trace(&self, client: usize, trace: &[TraceRow]) -> Result<()> {
        match self.path(&["selection", &format!("client{client}_trace.csv")])? {
            Some(p) => write_trace_csv(&p, trace),
            None => Ok(()),
        }
    }

    pub fn synthetic(&self, client: usize, ds: &Dataset) -> Result<()> {
        match self.path(&["synthetic", &format!("client{client}")])? {
            Some(p) => save_dataset_file(ds, &p),
            None => Ok(()),
        }
    }

    pub fn quota(&self, records: &[QuotaRecord]) -> Result<()> {
        match self.path(&[QUOTA_FILE])? {
            Some(p) => write_quota_json(&p, records),
            None => Ok(()),
        }
    }

    /// `metrics.csv`, per-class metrics, confusions and `summary.json`.
    pub fn report(&self, report: &RunReport) -> Result<()> {
        let Some(metrics_path) = self.path(&[METRICS_FILE])? else {
            return Ok(());
        };
        let mut w = csv::Writer::from_path(&metrics_path)?;
        for p in &report.phases {
            w.serialize(MetricsRow {
                phase: p.phase.clone(),
                accuracy: p.accuracy,
                macro_precision: p.macro_precision,
                macro_recall: p.macro_recall,
            })?;
        }
        w.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(p) = self.path(&["per_class.csv"])? {
            write_per_class_csv(report, &p)?;
        }
        for c in &report.confusion {
            self.confusion(&c.name, &c.matrix)?;
        }
        if let Some(p) = self.path(&[SUMMARY_FILE])? {
            fs::write(&p, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// One row per (phase, class) with precision and recall.
pub fn write_per_class_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &report.phases {
        for (class, (precision, recall)) in p.precision.iter().zip(&p.recall).enumerate() {
            w.serialize(PerClassRow {
                phase: p.phase.clone(),
                class,
                precision: *precision,
                recall: *recall,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `summary.json` and checks it against `metrics.csv` and the final
/// confusion matrix on disk.
pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(SUMMARY_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let report: RunReport = serde_json::from_slice(&raw)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut reader = csv::Reader::from_path(&metrics_path)?;
    let rows = reader
        .deserialize::<MetricsRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.len() != report.phases.len() {
        return Err(Error::LengthMismatch {
            expected: report.phases.len(),
            found: rows.len(),
        });
    }
    for (row, phase) in rows.iter().zip(&report.phases) {
        if row.phase != phase.phase || row.accuracy != phase.accuracy {
            return Err(Error::invalid(format!(
                "{} disagrees with {} for phase {}",
                METRICS_FILE, SUMMARY_FILE, phase.phase
            )));
        }
    }
    for c in &report.confusion {
        let on_disk = ConfusionMatrix::read_csv(&dir.join("confusion").join(format!("{}.csv", c.name)))?;
        if on_disk != c.matrix {
            return Err(Error::invalid(format!("confusion {} disagrees with {}", c.name, SUMMARY_FILE)));
        }
    }
    Ok(report)
}

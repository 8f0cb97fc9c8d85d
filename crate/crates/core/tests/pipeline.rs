mod common;

use common::small_config;
use ddsa_core::data::denied_hidden_reads;
use ddsa_core::pipeline::{
    load_report, run_baseline, run_experiment, run_sweep, BaselineMode, DatasetSource, SweepAxis, CONFIG_FILE,
    METRICS_FILE, QUOTA_FILE, ROUNDS_FILE, SUMMARY_FILE, SWEEP_FILE,
};
use ddsa_core::synth::read_quota_json;

#[test]
fn pipeline_never_reads_hidden_labels_unsealed() {
    let before = denied_hidden_reads();
    let report = run_experiment(&small_config()).unwrap();
    assert_eq!(denied_hidden_reads(), before);
    assert!(!report.oracle_mode);
}

#[test]
fn zero_quota_reduces_to_labeled_baseline() {
    let mut cfg = small_config();
    cfg.synthesis.alpha = 1e-6;
    let ddsa = run_experiment(&cfg).unwrap();
    assert!(ddsa.clients.iter().all(|c| c.synthetic == 0));
    cfg.baseline_mode = BaselineMode::FedavgLabeled;
    let labeled = run_experiment(&cfg).unwrap();
    assert_eq!(ddsa.final_params_checksum, labeled.final_params_checksum);
    assert_eq!(ddsa.final_accuracy.to_bits(), labeled.final_accuracy.to_bits());
}

#[test]
fn same_seed_same_report() {
    let a = run_experiment(&small_config()).unwrap();
    let b = run_experiment(&small_config()).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    let mut other = small_config();
    other.seed = 1;
    let c = run_experiment(&other).unwrap();
    assert_ne!(a.final_params_checksum, c.final_params_checksum);
}

#[test]
fn threads_do_not_change_results() {
    let mut seq = small_config();
    seq.threads = Some(1);
    let mut par = small_config();
    par.threads = Some(3);
    for mode in [BaselineMode::None, BaselineMode::FedavgSl] {
        seq.baseline_mode = mode;
        par.baseline_mode = mode;
        let a = run_experiment(&seq).unwrap();
        let b = run_experiment(&par).unwrap();
        assert_eq!(a.without_timing(), b.without_timing(), "{mode:?}");
    }
}

#[test]
fn artifacts_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let report = run_experiment(&cfg).unwrap();
    for f in [CONFIG_FILE, ROUNDS_FILE, METRICS_FILE, QUOTA_FILE, SUMMARY_FILE, "per_class.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert!(dir.path().join("confusion/final.csv").is_file());
    assert!(dir.path().join("synthetic/client0").is_dir());
    let back = load_report(dir.path()).unwrap();
    assert_eq!(back, report);
    let quotas = read_quota_json(&dir.path().join(QUOTA_FILE)).unwrap();
    assert_eq!(quotas.len(), cfg.partition.clients);
    let resolved = ddsa_core::pipeline::ExperimentConfig::from_json_file(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let reports = run_sweep(&cfg, SweepAxis::Alpha, &[0.2, 1.0, 2.1]).unwrap();
    assert_eq!(reports.len(), 3);
    let mut rows = csv::Reader::from_path(dir.path().join(SWEEP_FILE)).unwrap();
    assert_eq!(rows.records().count(), 3);
    assert!(dir.path().join("alpha=0.2").join(SUMMARY_FILE).is_file());
    let realized: Vec<f64> = reports.iter().map(|r| r.mean_alpha_realized().unwrap()).collect();
    assert!(realized.windows(2).all(|w| w[0] <= w[1]), "{realized:?}");
}

#[test]
fn full_supervision_collapses_the_baselines() {
    let mut cfg = small_config();
    cfg.partition.lambda = 1.0;
    cfg.baseline_mode = BaselineMode::FedavgSl;
    let sl = run_baseline(&cfg).unwrap();
    cfg.baseline_mode = BaselineMode::FedavgLabeled;
    let labeled = run_baseline(&cfg).unwrap();
    assert_eq!(sl.final_params_checksum, labeled.final_params_checksum);

    let swept = run_sweep(&small_config(), SweepAxis::Lambda, &[1.0]).unwrap();
    assert_eq!(swept[0].mode, "fedavg_sl");
    assert_eq!(swept[0].final_params_checksum, sl.final_params_checksum);
}

#[test]
fn baseline_rejects_pipeline_mode() {
    assert!(run_baseline(&small_config()).is_err());
}

#[test]
fn oracle_baseline_is_flagged() {
    let mut cfg = small_config();
    cfg.baseline_mode = BaselineMode::FedavgSl;
    let before = denied_hidden_reads();
    let r = run_experiment(&cfg).unwrap();
    assert!(r.oracle_mode);
    assert_eq!(denied_hidden_reads(), before);
}

#[test]
fn failures_name_the_phase_and_persist() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.dataset.source = DatasetSource::File {
        path: dir.path().join("missing"),
    };
    cfg.output_dir = Some(dir.path().join("out"));
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.contains("world"), "{err}");
    let persisted = std::fs::read_to_string(dir.path().join("out/error.txt")).unwrap();
    assert!(persisted.contains("world"));
}

#[test]
fn selection_axis_toggles_selection() {
    let cfg = small_config();
    let off = SweepAxis::Selection.apply(&cfg, 0.0);
    assert!(!off.use_selection);
    let r = run_experiment(&off).unwrap();
    assert!(r.clients.iter().all(|c| c.selection_objective.is_none() && c.selected == c.pseudo_labeled));
}

#[test]
fn shipped_reference_config_matches_code() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let shipped = ddsa_core::pipeline::ExperimentConfig::from_json_file(&path).unwrap();
    assert_eq!(shipped, ddsa_core::pipeline::ExperimentConfig::reference());
}

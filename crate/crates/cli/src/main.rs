use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ddsa_core::pipeline::{
    load_report, run_experiment, run_sweep, write_per_class_csv, BaselineMode, ExperimentConfig, RunReport,
    SweepAxis,
};

/// Desk-scale simulator for diffusion-aided federated semi-supervised learning.
#[derive(Parser)]
#[command(name = "ddsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline (or the baseline named in the config).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a FedAvg baseline.
    Baseline {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a configuration axis.
    Sweep {
        /// alpha, lambda, gamma or selection.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    FedavgLabeled,
    FedavgSl,
}

fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>, label: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json_file(config)
        .with_context(|| format!("loading config {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = Some(o);
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("runs").join(format!("{label}-seed{}", cfg.seed)));
    }
    Ok(cfg)
}

fn print_summary(r: &RunReport) {
    println!("mode {}  seed {}  oracle {}", r.mode, r.seed, r.oracle_mode);
    println!("{:<12} {:>9} {:>10} {:>10}", "phase", "accuracy", "macro_prec", "macro_rec");
    for p in &r.phases {
        println!(
            "{:<12} {:>9.4} {:>10.4} {:>10.4}",
            p.phase, p.accuracy, p.macro_precision, p.macro_recall
        );
    }
    if !r.clients.is_empty() && r.clients.iter().any(|c| c.alpha_realized.is_some()) {
        println!("{:<7} {:>8} {:>10} {:>7} {:>9} {:>9} {:>8}", "client", "labeled", "unlabeled", "pseudo", "selected", "synthetic", "alpha");
        for c in &r.clients {
            println!(
                "{:<7} {:>8} {:>10} {:>7} {:>9} {:>9} {:>8.3}",
                c.client_id,
                c.labeled,
                c.unlabeled,
                c.pseudo_labeled,
                c.selected,
                c.synthetic,
                c.alpha_realized.unwrap_or(0.0)
            );
        }
    }
    let up: u64 = r.bytes.iter().map(|b| b.bytes_up).sum();
    let down: u64 = r.bytes.iter().map(|b| b.bytes_down).sum();
    println!("bytes up {up}, down {down}, wall {} ms", r.wall_ms);
}

fn run_and_print(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    print_summary(&report);
    if let Some(dir) = &cfg.output_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed, out, "run")?;
            run_and_print(&cfg)
        }
        Command::Baseline { mode, config, seed, out } => {
            let mut cfg = load(&config, seed, out, "baseline")?;
            cfg.baseline_mode = match mode {
                Mode::FedavgLabeled => BaselineMode::FedavgLabeled,
                Mode::FedavgSl => BaselineMode::FedavgSl,
            };
            run_and_print(&cfg)
        }
        Command::Sweep {
            axis,
            values,
            config,
            seed,
            out,
        } => {
            let axis: SweepAxis = axis.parse()?;
            if values.is_empty() {
                bail!("--values needs at least one number");
            }
            let cfg = load(&config, seed, out, &format!("sweep-{}", axis.as_str()))?;
            let reports = run_sweep(&cfg, axis, &values)?;
            println!("{:<10} {:<16} {:>9}", axis.as_str(), "mode", "accuracy");
            for (v, r) in values.iter().zip(&reports) {
                println!("{:<10} {:<16} {:>9.4}", v, r.mode, r.final_accuracy);
            }
            if let Some(dir) = &cfg.output_dir {
                log::info!("sweep table in {}", dir.join(ddsa_core::pipeline::SWEEP_FILE).display());
            }
            Ok(())
        }
        Command::Report { run } => {
            let report = load_report(&run).with_context(|| format!("reading run {}", run.display()))?;
            print_summary(&report);
            let path = run.join("per_class.csv");
            write_per_class_csv(&report, &path)?;
            println!("per-class metrics in {}", path.display());
            if !report.excluded_losses.is_empty() {
                println!(
                    "{}",
                    serde_json::json!({ "excluded_losses": report.excluded_losses })
                );
            }
            Ok(())
        }
    }
}

//! Five-step orchestration, baselines and sweeps.
//!
//! 1. federated classifier on labeled data;
//! 2. pseudo-labeling, confusion protocol and optional selection;
//! 3. federated VAE on labeled and unlabeled data, then a federated
//!    conditional diffusion model on encoded labeled and selected data;
//! 4. per-client quota planning and synthetic generation;
//! 5. federated retraining from scratch on labeled and synthetic data.

mod config;
mod report;
mod world;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

pub use config::{
    BaselineMode, ClassifierConfig, DatasetConfig, DatasetSource, DenoiserConfig, DiffusionConfig,
    ExperimentConfig, PhaseConfigs, VaeConfig,
};
pub use report::{
    load_report, write_per_class_csv, Artifacts, ClientSummary, NamedConfusion, PhaseBytes,
    PhaseMetrics, RunReport, CONFIG_FILE, FINAL_PHASE, METRICS_FILE, QUOTA_FILE, ROUNDS_FILE,
    SUMMARY_FILE,
};
pub use world::{build_world, ClientData, World};

use crate::data::{Dataset, Sample};
use crate::diffusion::{init_denoiser, CdmObjective};
use crate::error::{Error, Result};
use crate::fed::{run_federated, ClientState, FedOutcome, FedRun, RoundConfig};
use crate::metrics::{evaluate, reveal};
use crate::nn::{init_classifier, init_vae, vae_encode, ClassifierObjective, MlpSpec, Objective, ParamVector, VaeObjective};
use crate::par::Parallelism;
use crate::pseudo::{
    aggregate_confusions, estimate_pseudo_confusion, local_confusion, pseudo_label, ConfusionMatrix,
    PseudoLabelCounts,
};
use crate::rng::{self, derive_seed, tag};
use crate::select::{apply_selection, solve_selection_with, SelectionConfig, SelectionVector};
use crate::synth::{
    effective_alpha, generate_synthetic, global_histogram, plan_quota, ClassHistogram, Generator,
    QuotaRecord,
};

/// Losses of the original autoencoder objective left out of the VAE.
const EXCLUDED_LOSSES: [&str; 2] = ["perceptual", "adversarial"];

fn seed_for(config: &ExperimentConfig, label: &str) -> u64 {
    derive_seed(config.seed, &[tag(label)])
}

pub fn parallelism_for(config: &ExperimentConfig) -> Parallelism {
    match config.threads {
        Some(n) => Parallelism::with_threads(n),
        None => Parallelism::from_env(),
    }
}

struct Phase<'a> {
    config: &'a ExperimentConfig,
    parallelism: &'a Parallelism,
    artifacts: &'a Artifacts,
    bytes: Vec<PhaseBytes>,
}

impl Phase<'_> {
    fn federate(
        &mut self,
        name: &str,
        datasets: Vec<Dataset>,
        init: &ParamVector,
        rounds: &RoundConfig,
        objective: &dyn Objective,
        probe: Option<&Dataset>,
    ) -> Result<FedOutcome> {
        let mut clients: Vec<ClientState> = datasets
            .into_iter()
            .enumerate()
            .map(|(k, ds)| ClientState::new(k, ds, init))
            .collect();
        let outcome = run_federated(
            &mut clients,
            rounds,
            objective,
            init,
            &FedRun {
                phase: name,
                seed: seed_for(self.config, name),
                parallelism: self.parallelism,
                probe,
            },
        )?;
        self.artifacts.rounds(&outcome.telemetry)?;
        self.bytes.push(PhaseBytes::from_telemetry(name, &outcome.telemetry));
        Ok(outcome)
    }

    /// Final supervised phase shared by the pipeline and both baselines, so
    /// identical inputs give bitwise-identical parameters.
    fn retrain(&mut self, spec: &MlpSpec, datasets: Vec<Dataset>, test: &Dataset) -> Result<ParamVector> {
        let init = init_classifier(spec, &mut rng::stream(seed_for(self.config, "retrain_init"), &[]))?;
        let objective = ClassifierObjective::new(spec.clone());
        let out = self.federate(
            "retrain",
            datasets,
            &init,
            &self.config.phases.retrain,
            &objective,
            Some(test),
        )?;
        self.artifacts.params("final", &out.params)?;
        Ok(out.params)
    }
}

fn union(a: &Dataset, b: &Dataset, name: String) -> Result<Dataset> {
    let mut out = a.clone();
    out.name = name;
    out.extend_from(b)?;
    Ok(out)
}

fn client_summary(c: &ClientData) -> ClientSummary {
    ClientSummary {
        client_id: c.client_id,
        labeled: c.labeled.len(),
        local_test: c.local_test.len(),
        unlabeled: c.unlabeled.len(),
        ..ClientSummary::default()
    }
}

fn start(config: &ExperimentConfig) -> Result<(Artifacts, Parallelism)> {
    config.validate()?;
    let artifacts = Artifacts::new(config.output_dir.as_deref())?;
    artifacts.text(CONFIG_FILE, &config.to_json()?)?;
    Ok((artifacts, parallelism_for(config)))
}

fn finish(
    config: &ExperimentConfig,
    artifacts: &Artifacts,
    mut report: RunReport,
    started: Instant,
) -> Result<RunReport> {
    report.wall_ms = started.elapsed().as_millis() as u64;
    artifacts.report(&report)?;
    log::info!(
        "{} seed {}: final accuracy {:.4} in {} ms",
        report.mode,
        config.seed,
        report.final_accuracy,
        report.wall_ms
    );
    Ok(report)
}

fn record_failure(artifacts: &Artifacts, err: &Error) {
    if let Err(e) = artifacts.text("error.txt", &format!("{err}\n")) {
        log::error!("could not persist failure: {e}");
    }
}

/// Runs the mode named by `config.baseline_mode`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    match config.baseline_mode {
        BaselineMode::None => run_ddsa_fssl(config),
        _ => run_baseline(config),
    }
}

/// Full five-step pipeline. Failures are reported as `Error::Phase` and
/// leave the artifacts written so far on disk.
pub fn run_ddsa_fssl(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let (artifacts, parallelism) = start(config)?;
    let result = pipeline(config, &artifacts, &parallelism);
    if let Err(e) = &result {
        record_failure(&artifacts, e);
    }
    finish(config, &artifacts, result?, started)
}

struct StepTwo {
    selected: Vec<Dataset>,
    summaries: Vec<ClientSummary>,
    confusion: Vec<NamedConfusion>,
}

fn pseudo_and_select(
    config: &ExperimentConfig,
    world: &World,
    spec: &MlpSpec,
    classifier: &ParamVector,
    artifacts: &Artifacts,
    parallelism: &Parallelism,
) -> Result<StepTwo> {
    let c = world.num_classes;
    let pseudo: Vec<Dataset> = world
        .clients
        .iter()
        .map(|cl| pseudo_label(classifier, spec, &cl.unlabeled))
        .collect::<Result<_>>()?;
    let local: Vec<ConfusionMatrix> = world
        .clients
        .iter()
        .map(|cl| {
            if cl.local_test.is_empty() {
                Ok(ConfusionMatrix::zeros(c))
            } else {
                local_confusion(classifier, spec, &cl.local_test)
            }
        })
        .collect::<Result<_>>()?;
    let global = aggregate_confusions(&local)?;
    artifacts.confusion("global_test_aggregate", &global)?;
    let (covered, empty_columns) = global.fill_empty_columns_uniform();
    let selection_cfg = SelectionConfig {
        seed: derive_seed(seed_for(config, "selection"), &[config.selection.seed]),
        ..config.selection.clone()
    };

    let mut selected = Vec::with_capacity(world.clients.len());
    let mut summaries = Vec::with_capacity(world.clients.len());
    let mut confusion = vec![NamedConfusion {
        name: "global_test_aggregate".into(),
        matrix: global.clone(),
    }];
    for (cl, pseudo) in world.clients.iter().zip(pseudo) {
        let k = cl.client_id;
        let counts = PseudoLabelCounts::of(&pseudo);
        let filled_columns: Vec<usize> = empty_columns
            .iter()
            .copied()
            .filter(|&j| counts.counts[j] > 0)
            .collect();
        if !filled_columns.is_empty() {
            log::warn!("client {k}: no global test mass in columns {filled_columns:?}; filled uniformly");
        }
        let estimated = estimate_pseudo_confusion(&covered, &counts)?;
        artifacts.confusion(&format!("client{k}_pseudo_estimated"), &estimated)?;
        let labeled = ConfusionMatrix::diagonal(
            &cl.labeled.class_counts().iter().map(|&n| n as f64).collect::<Vec<_>>(),
        );
        let (rho, objective) = if config.use_selection && !pseudo.is_empty() {
            match solve_selection_with(&labeled, &estimated, &selection_cfg, parallelism) {
                Ok(r) => {
                    artifacts.selection_trace(k, &r.trace)?;
                    (r.selection, Some(r.objective))
                }
                Err(Error::UndefinedPrecision) => (SelectionVector::keep_all(c), None),
                Err(e) => return Err(e),
            }
        } else {
            (SelectionVector::keep_all(c), None)
        };
        let kept = apply_selection(&pseudo, &rho, derive_seed(seed_for(config, "apply_selection"), &[k as u64]))?;
        summaries.push(ClientSummary {
            pseudo_labeled: pseudo.len(),
            selected: kept.len(),
            rho: rho.rho.clone(),
            selection_objective: objective,
            filled_columns,
            ..client_summary(cl)
        });
        confusion.push(NamedConfusion {
            name: format!("client{k}_pseudo_estimated"),
            matrix: estimated,
        });
        selected.push(kept);
    }
    Ok(StepTwo {
        selected,
        summaries,
        confusion,
    })
}

/// Encoder means of `data`, keeping labels and provenance.
fn encode_dataset(params: &ParamVector, spec: &crate::nn::VaeSpec, data: &Dataset) -> Result<Dataset> {
    let mut out = Dataset::new(format!("{}_latent", data.name), data.num_classes, spec.latent_dim);
    for s in &data.samples {
        let label = s
            .label()
            .ok_or_else(|| Error::invalid("latent training data must carry labels"))?;
        let (mu, _) = vae_encode(params, spec, &s.features_f64())?;
        let z = mu.iter().map(|&v| v as f32).collect();
        out.samples.push(Sample::with_provenance(z, label, s.provenance));
    }
    Ok(out)
}

fn pipeline(config: &ExperimentConfig, artifacts: &Artifacts, parallelism: &Parallelism) -> Result<RunReport> {
    let world = build_world(config).map_err(|e| e.in_phase("world"))?;
    let (c, d) = (world.num_classes, world.dim);
    let mut phase = Phase {
        config,
        parallelism,
        artifacts,
        bytes: Vec::new(),
    };
    let mut phases = Vec::new();
    let mut confusion = Vec::new();

    // Step 1.
    let spec = config.classifier_spec(d, c);
    let step1 = (|| {
        let init = init_classifier(&spec, &mut rng::stream(seed_for(config, "classifier_init"), &[]))?;
        let out = phase.federate(
            "classifier",
            world.clients.iter().map(|cl| cl.labeled.clone()).collect(),
            &init,
            &config.phases.classifier,
            &ClassifierObjective::new(spec.clone()),
            Some(&world.global_test),
        )?;
        artifacts.params("classifier", &out.params)?;
        let eval = evaluate(&out.params, &spec, &world.global_test)?;
        Ok::<_, Error>((out.params, eval))
    })()
    .map_err(|e| e.in_phase("classifier"))?;
    let (classifier, eval1) = step1;
    phases.push(PhaseMetrics::from_evaluation("classifier", &eval1));
    confusion.push(NamedConfusion {
        name: "classifier".into(),
        matrix: eval1.confusion.clone(),
    });

    // Step 2.
    let two = pseudo_and_select(config, &world, &spec, &classifier, artifacts, parallelism)
        .map_err(|e| e.in_phase("pseudo_selection"))?;
    confusion.extend(two.confusion);
    let mut summaries = two.summaries;

    // Step 3.
    let vae_spec = config.vae_spec(d);
    let vae = (|| {
        vae_spec.validate()?;
        let init = init_vae(&vae_spec, &mut rng::stream(seed_for(config, "vae_init"), &[]))?;
        let data = world
            .clients
            .iter()
            .map(|cl| union(&cl.labeled, &cl.unlabeled, format!("client{}_vae", cl.client_id)))
            .collect::<Result<Vec<_>>>()?;
        let objective = VaeObjective {
            spec: vae_spec.clone(),
            kl_weight: config.vae.kl_weight,
        };
        let out = phase.federate("vae", data, &init, &config.phases.vae, &objective, None)?;
        artifacts.params("vae", &out.params)?;
        Ok::<_, Error>(out.params)
    })()
    .map_err(|e| e.in_phase("vae"))?;

    let den_spec = config.denoiser_spec(c);
    let schedule = config.schedule()?;
    let denoiser = (|| {
        let latents = world
            .clients
            .iter()
            .zip(&two.selected)
            .map(|(cl, kept)| {
                let data = union(&cl.labeled, kept, format!("client{}_cdm", cl.client_id))?;
                encode_dataset(&vae, &vae_spec, &data)
            })
            .collect::<Result<Vec<_>>>()?;
        let init = init_denoiser(&den_spec, &mut rng::stream(seed_for(config, "cdm_init"), &[]))?;
        let objective = CdmObjective {
            spec: den_spec.clone(),
            schedule: schedule.clone(),
        };
        let out = phase.federate("cdm", latents, &init, &config.phases.cdm, &objective, None)?;
        artifacts.params("denoiser", &out.params)?;
        Ok::<_, Error>(out.params)
    })()
    .map_err(|e| e.in_phase("cdm"))?;

    // Step 4.
    let synthetic = (|| {
        let local: Vec<ClassHistogram> = world.clients.iter().map(|cl| ClassHistogram::of(&cl.labeled)).collect();
        let global = global_histogram(&local)?;
        let generator = Generator {
            denoiser_spec: &den_spec,
            denoiser: &denoiser,
            vae_spec: &vae_spec,
            vae: &vae,
            schedule: &schedule,
            variance: config.synthesis.posterior_variance,
        };
        let seed = seed_for(config, "synthesis");
        let alpha = config.synthesis.alpha;
        let mut records = Vec::with_capacity(world.clients.len());
        let mut out = Vec::with_capacity(world.clients.len());
        for (cl, (hist, summary)) in world.clients.iter().zip(local.iter().zip(summaries.iter_mut())) {
            let mut plan = plan_quota(hist, cl.unlabeled.len(), &global, alpha)?;
            if let Some(caps) = &config.synthesis.class_caps {
                plan = plan.capped(caps)?;
            }
            let syn = generate_synthetic(&plan, &generator, cl.client_id, seed, parallelism)?;
            let realized = effective_alpha(cl.labeled.len(), cl.unlabeled.len(), syn.len()).ok();
            artifacts.synthetic(cl.client_id, &syn)?;
            summary.alpha_requested = Some(alpha);
            summary.alpha_realized = realized;
            summary.targets = plan.targets.clone();
            summary.quotas = plan.quotas.clone();
            summary.synthetic = syn.len();
            records.push(QuotaRecord {
                client_id: cl.client_id,
                alpha_requested: alpha,
                alpha_realized: realized.unwrap_or(0.0),
                targets: plan.targets,
                quotas: plan.quotas,
            });
            out.push(syn);
        }
        artifacts.quota(&records)?;
        Ok::<_, Error>(out)
    })()
    .map_err(|e| e.in_phase("synthesis"))?;

    // Step 5.
    let (final_params, eval) = (|| {
        let data = world
            .clients
            .iter()
            .zip(&synthetic)
            .map(|(cl, syn)| union(&cl.labeled, syn, format!("client{}_retrain", cl.client_id)))
            .collect::<Result<Vec<_>>>()?;
        let params = phase.retrain(&spec, data, &world.global_test)?;
        let eval = evaluate(&params, &spec, &world.global_test)?;
        Ok::<_, Error>((params, eval))
    })()
    .map_err(|e| e.in_phase("retrain"))?;
    phases.push(PhaseMetrics::from_evaluation(FINAL_PHASE, &eval));
    confusion.push(NamedConfusion {
        name: FINAL_PHASE.into(),
        matrix: eval.confusion.clone(),
    });

    Ok(RunReport {
        mode: BaselineMode::None.as_str().into(),
        oracle_mode: false,
        seed: config.seed,
        final_accuracy: eval.accuracy,
        phases,
        confusion,
        clients: summaries,
        bytes: phase.bytes,
        final_params_checksum: final_params.checksum(),
        excluded_losses: EXCLUDED_LOSSES.iter().map(|s| s.to_string()).collect(),
        wall_ms: 0,
    })
}

/// `fedavg_labeled` trains on the clients' labeled data only; `fedavg_sl`
/// additionally reveals every hidden label (oracle mode). Both use the
/// retraining schedule and seeds of the pipeline's final phase.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let mode = match config.baseline_mode {
        BaselineMode::None => {
            return Err(Error::invalid("run_baseline needs baseline_mode fedavg_labeled or fedavg_sl"))
        }
        m => m,
    };
    let (artifacts, parallelism) = start(config)?;
    let result = (|| {
        let world = build_world(config).map_err(|e| e.in_phase("world"))?;
        let spec = config.classifier_spec(world.dim, world.num_classes);
        let oracle = mode == BaselineMode::FedavgSl;
        if oracle {
            log::warn!("fedavg_sl: oracle mode, hidden labels are revealed for training");
        }
        let data = world
            .clients
            .iter()
            .map(|cl| {
                if !oracle {
                    return Ok(cl.labeled.clone());
                }
                let mut ds = cl.labeled.clone();
                let _scope = reveal("fedavg_sl oracle baseline");
                for s in &cl.unlabeled.samples {
                    ds.samples.push(s.reveal_as_labeled()?);
                }
                Ok(ds)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_phase("retrain"))?;
        let mut phase = Phase {
            config,
            parallelism: &parallelism,
            artifacts: &artifacts,
            bytes: Vec::new(),
        };
        let params = phase
            .retrain(&spec, data, &world.global_test)
            .map_err(|e| e.in_phase("retrain"))?;
        let eval = evaluate(&params, &spec, &world.global_test)?;
        Ok::<_, Error>(RunReport {
            mode: mode.as_str().into(),
            oracle_mode: oracle,
            seed: config.seed,
            final_accuracy: eval.accuracy,
            phases: vec![PhaseMetrics::from_evaluation(FINAL_PHASE, &eval)],
            confusion: vec![NamedConfusion {
                name: FINAL_PHASE.into(),
                matrix: eval.confusion.clone(),
            }],
            clients: world
                .clients
                .iter()
                .map(|cl| ClientSummary {
                    rho: Vec::new(),
                    ..client_summary(cl)
                })
                .collect(),
            bytes: phase.bytes,
            final_params_checksum: params.checksum(),
            excluded_losses: Vec::new(),
            wall_ms: 0,
        })
    })();
    if let Err(e) = &result {
        record_failure(&artifacts, e);
    }
    finish(config, &artifacts, result?, started)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Lambda,
    Gamma,
    /// 0 disables selection, anything else enables it.
    Selection,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Selection => "selection",
        }
    }

    /// The configuration of one sweep point. A λ = 1 point has no unlabeled
    /// data and is run as the fully supervised baseline.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Alpha => cfg.synthesis.alpha = value,
            SweepAxis::Lambda => {
                cfg.partition.lambda = value;
                if value == 1.0 {
                    cfg.baseline_mode = BaselineMode::FedavgSl;
                }
            }
            SweepAxis::Gamma => cfg.partition.gamma = value,
            SweepAxis::Selection => cfg.use_selection = value != 0.0,
        }
        cfg
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "lambda" => Ok(SweepAxis::Lambda),
            "gamma" => Ok(SweepAxis::Gamma),
            "selection" => Ok(SweepAxis::Selection),
            other => Err(Error::invalid(format!(
                "unknown sweep axis {other:?} (expected alpha, lambda, gamma or selection)"
            ))),
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    axis: &'a str,
    value: f64,
    mode: &'a str,
    seed: u64,
    final_accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    mean_alpha_realized: Option<f64>,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// One run per value with the base seed. With an output directory, each run
/// writes under `<axis>=<value>/` and a consolidated `sweep.csv` is written.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = axis.apply(base, v);
        cfg.output_dir = base
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{}={v}", axis.as_str())));
        reports.push(run_experiment(&cfg)?);
    }
    if let Some(dir) = &base.output_dir {
        let path: PathBuf = dir.join(SWEEP_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for (&v, r) in values.iter().zip(&reports) {
            let fin = r.final_metrics();
            w.serialize(SweepRow {
                axis: axis.as_str(),
                value: v,
                mode: &r.mode,
                seed: r.seed,
                final_accuracy: r.final_accuracy,
                macro_precision: fin.map_or(0.0, |m| m.macro_precision),
                macro_recall: fin.map_or(0.0, |m| m.macro_recall),
                mean_alpha_realized: r.mean_alpha_realized(),
            })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}

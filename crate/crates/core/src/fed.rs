//! Federated simulation: local mini-batch training, weighted aggregation and
//! the round loop, with per-round telemetry.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{optimizer_step, Objective, OptimizerConfig, OptimizerState, ParamVector};
use crate::par::Parallelism;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "full_participation")]
    pub participation: f64,
}

fn full_participation() -> f64 {
    1.0
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub train_data: Dataset,
    pub local_params: ParamVector,
    pub optimizer_state: OptimizerState,
}

impl ClientState {
    pub fn new(client_id: usize, train_data: Dataset, init: &ParamVector) -> Self {
        Self {
            client_id,
            train_data,
            local_params: init.clone(),
            optimizer_state: OptimizerState::new(),
        }
    }
}

/// Stream for `client_id` in `round` of a phase seeded with `seed`.
pub fn client_stream(seed: u64, client_id: usize, round: usize) -> Rng {
    rng::stream(seed, &[client_id as u64, round as u64])
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let size = if batch_size == 0 { n.max(1) } else { batch_size };
    (0..n).step_by(size).map(move |start| start..(start + size).min(n))
}

/// Trains from `global`; returns the new parameters and the mean mini-batch
/// loss of the last epoch (NaN when no step was taken).
fn train_locally(
    client: &mut ClientState,
    global: &ParamVector,
    config: &RoundConfig,
    objective: &dyn Objective,
    round: usize,
    rng: &mut Rng,
) -> Result<(ParamVector, f64)> {
    global.ensure_same_layout(&client.local_params)?;
    client.local_params = global.clone();
    client.optimizer_state = OptimizerState::new();
    if config.local_epochs == 0 {
        return Ok((client.local_params.clone(), f64::NAN));
    }
    if client.train_data.is_empty() {
        return Err(Error::Empty("client training data"));
    }
    let lr = config.optimizer.rate_for_round(round);
    let mut order: Vec<usize> = (0..client.train_data.len()).collect();
    let mut last_epoch_loss = f64::NAN;
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for range in batches(order.len(), config.batch_size) {
            let batch: Vec<&Sample> = order[range]
                .iter()
                .map(|&i| &client.train_data.samples[i])
                .collect();
            let (loss, grad) = objective.loss_and_grad(&client.local_params, &batch, rng)?;
            optimizer_step(
                &mut client.local_params,
                &grad,
                &mut client.optimizer_state,
                &config.optimizer,
                lr,
            )?;
            sum += loss;
            count += 1;
        }
        last_epoch_loss = sum / count as f64;
    }
    Ok((client.local_params.clone(), last_epoch_loss))
}

/// `E` epochs of mini-batch updates starting from the global parameters.
pub fn local_train(
    client: &mut ClientState,
    global: &ParamVector,
    config: &RoundConfig,
    objective: &dyn Objective,
    round: usize,
    rng: &mut Rng,
) -> Result<ParamVector> {
    Ok(train_locally(client, global, config, objective, round, rng)?.0)
}

/// `Σ_k p_k θ_k` with `p_k = n_k / Σ n_j`, summed in list order.
pub fn fedavg_aggregate(params: &[ParamVector], data_sizes: &[usize]) -> Result<ParamVector> {
    let first = params.first().ok_or(Error::Empty("aggregation input"))?;
    if params.len() != data_sizes.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation sizes",
            expected: params.len(),
            found: data_sizes.len(),
        });
    }
    if data_sizes.contains(&0) {
        return Err(Error::invalid("aggregation weights need positive data sizes"));
    }
    for p in &params[1..] {
        first.ensure_same_layout(p)?;
    }
    let weights = aggregation_weights(data_sizes);
    let mut values = vec![0.0; first.len()];
    for (p, w) in params.iter().zip(&weights) {
        for (acc, v) in values.iter_mut().zip(&p.values) {
            *acc += w * v;
        }
    }
    first.with_values(values)
}

pub fn aggregation_weights(data_sizes: &[usize]) -> Vec<f64> {
    let total: usize = data_sizes.iter().sum();
    data_sizes
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTelemetry {
    pub round: usize,
    pub phase: String,
    pub global_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub params: ParamVector,
    pub telemetry: Vec<RoundTelemetry>,
}

impl FedOutcome {
    pub fn bytes_exchanged(&self) -> (u64, u64) {
        self.telemetry
            .iter()
            .fold((0, 0), |(u, d), t| (u + t.bytes_up, d + t.bytes_down))
    }
}

/// Knobs of one federated phase that are not part of the round schedule.
#[derive(Debug, Clone)]
pub struct FedRun<'a> {
    pub phase: &'a str,
    pub seed: u64,
    pub parallelism: &'a Parallelism,
    /// Data on which the aggregated model's loss is logged each round. When
    /// absent, the size-weighted mean of the clients' last-epoch training
    /// losses is logged instead.
    pub probe: Option<&'a Dataset>,
}

fn participants(clients: &[ClientState], fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let eligible: Vec<usize> = (0..clients.len())
        .filter(|&i| !clients[i].train_data.is_empty())
        .collect();
    if fraction >= 1.0 || eligible.is_empty() {
        return eligible;
    }
    let m = ((fraction * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut picked = eligible;
    picked.shuffle(&mut rng::stream(seed, &[rng::tag("participation"), round as u64]));
    picked.truncate(m);
    picked.sort_unstable();
    picked
}

fn probe_loss(objective: &dyn Objective, params: &ParamVector, probe: &Dataset, seed: u64, round: usize) -> Result<f64> {
    if probe.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = rng::stream(seed, &[rng::tag("probe"), round as u64]);
    let mut total = 0.0;
    for chunk in probe.samples.chunks(512) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        total += objective.loss(params, &batch, &mut rng)? * batch.len() as f64;
    }
    Ok(total / probe.len() as f64)
}

/// `R` rounds of broadcast → local training → aggregation.
///
/// Clients without data sit out. Aggregation runs over participants in
/// ascending `client_id` order, so parallel and sequential execution give
/// bitwise-identical parameters.
pub fn run_federated(
    clients: &mut [ClientState],
    config: &RoundConfig,
    objective: &dyn Objective,
    init: &ParamVector,
    run: &FedRun<'_>,
) -> Result<FedOutcome> {
    config.validate()?;
    for c in clients.iter() {
        init.ensure_same_layout(&c.local_params)?;
    }
    if clients.windows(2).any(|w| w[0].client_id >= w[1].client_id) {
        return Err(Error::invalid("clients must be sorted by ascending client_id"));
    }
    let mut global = init.clone();
    let mut telemetry = Vec::with_capacity(config.rounds);
    let payload = (init.len() * 4) as u64;
    for round in 0..config.rounds {
        let started = Instant::now();
        let chosen = participants(clients, config.participation, run.seed, round);
        if chosen.is_empty() {
            log::warn!("{}: no client holds data; round {round} skipped", run.phase);
        }
        let mut selected: Vec<&mut ClientState> = clients
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| chosen.binary_search(i).is_ok())
            .map(|(_, c)| c)
            .collect();
        let snapshot = &global;
        let results = run.parallelism.map_mut(&mut selected, |client| {
            let mut rng = client_stream(run.seed, client.client_id, round);
            train_locally(client, snapshot, config, objective, round, &mut rng)
        });
        let mut locals = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        for r in results {
            let (p, l) = r?;
            locals.push(p);
            losses.push(l);
        }
        let sizes: Vec<usize> = selected.iter().map(|c| c.train_data.len()).collect();
        if !locals.is_empty() {
            global = fedavg_aggregate(&locals, &sizes)?;
        }
        let global_loss = match run.probe {
            Some(probe) => probe_loss(objective, &global, probe, run.seed, round)?,
            None => aggregation_weights(&sizes)
                .iter()
                .zip(&losses)
                .map(|(w, l)| w * l)
                .sum::<f64>(),
        };
        let k = selected.len() as u64;
        telemetry.push(RoundTelemetry {
            round,
            phase: run.phase.to_string(),
            global_loss,
            bytes_up: k * payload,
            bytes_down: k * payload,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        log::debug!(
            "{} round {}/{}: loss {global_loss:.5}",
            run.phase,
            round + 1,
            config.rounds
        );
    }
    Ok(FedOutcome {
        params: global,
        telemetry,
    })
}

/// Appends telemetry rows to a `rounds.csv`, writing the header when the
/// file is new.
pub fn append_rounds_csv(path: &Path, rows: &[RoundTelemetry]) -> Result<()> {
    let exists = path.exists() && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundTelemetry>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;

    fn scalar(v: f64) -> ParamVector {
        let mut p = ParamVector::zeros(&[("theta".into(), 1)]);
        p.values[0] = v;
        p
    }

    /// `(θ − 3)² / 2` regardless of the batch.
    struct Quadratic;

    impl Objective for Quadratic {
        fn loss_and_grad(&self, p: &ParamVector, _: &[&Sample], _: &mut Rng) -> Result<(f64, Vec<f64>)> {
            let d = p.values[0] - 3.0;
            Ok((0.5 * d * d, vec![d]))
        }
    }

    struct Flat;

    impl Objective for Flat {
        fn loss_and_grad(&self, p: &ParamVector, _: &[&Sample], _: &mut Rng) -> Result<(f64, Vec<f64>)> {
            Ok((1.0, vec![0.0; p.len()]))
        }
    }

    fn data(n: usize) -> Dataset {
        let samples = (0..n).map(|i| Sample::labeled(vec![i as f32], 0)).collect();
        Dataset::from_samples("d", 1, 1, samples).unwrap()
    }

    fn cfg(epochs: usize) -> RoundConfig {
        RoundConfig {
            rounds: 1,
            local_epochs: epochs,
            batch_size: 0,
            optimizer: OptimizerConfig::sgd(0.1),
            participation: 1.0,
        }
    }

    #[test]
    fn zero_epochs_returns_global() {
        let global = scalar(1.25);
        let mut c = ClientState::new(0, data(4), &global);
        let out = local_train(&mut c, &global, &cfg(0), &Quadratic, 0, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(out, global);
    }

    #[test]
    fn flat_loss_keeps_params() {
        let global = scalar(-0.5);
        let mut c = ClientState::new(0, data(4), &global);
        let out = local_train(&mut c, &global, &cfg(5), &Flat, 0, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(out, global);
    }

    #[test]
    fn single_full_batch_step_on_quadratic() {
        let global = scalar(0.0);
        let mut c = ClientState::new(0, data(4), &global);
        let out = local_train(&mut c, &global, &cfg(1), &Quadratic, 0, &mut rng::stream(0, &[])).unwrap();
        assert!((out.values[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn aggregation_hand_cases() {
        let p = fedavg_aggregate(&[scalar(7.0)], &[3]).unwrap();
        assert_eq!(p.values[0], 7.0);
        let p = fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[5, 5]).unwrap();
        assert!((p.values[0] - 2.0).abs() < 1e-12);
        let p = fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[1, 3]).unwrap();
        assert!((p.values[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_errors() {
        assert!(fedavg_aggregate(&[], &[]).is_err());
        assert!(fedavg_aggregate(&[scalar(0.0)], &[1, 2]).is_err());
        assert!(fedavg_aggregate(&[scalar(0.0), scalar(1.0)], &[1, 0]).is_err());
        let other = ParamVector::zeros(&[("phi".into(), 1)]);
        assert!(fedavg_aggregate(&[scalar(0.0), other], &[1, 1]).is_err());
    }

    #[test]
    fn zero_rounds_returns_init() {
        let init = scalar(2.0);
        let mut clients = vec![ClientState::new(0, data(3), &init)];
        let par = Parallelism::sequential();
        let run = FedRun { phase: "t", seed: 1, parallelism: &par, probe: None };
        let mut c = cfg(1);
        c.rounds = 0;
        let out = run_federated(&mut clients, &c, &Quadratic, &init, &run).unwrap();
        assert_eq!(out.params, init);
        assert!(out.telemetry.is_empty());
    }

    #[test]
    fn bytes_follow_participation() {
        let init = scalar(0.0);
        let mut clients: Vec<ClientState> =
            (0..4).map(|k| ClientState::new(k, data(2), &init)).collect();
        let par = Parallelism::sequential();
        let run = FedRun { phase: "t", seed: 1, parallelism: &par, probe: None };
        let mut c = cfg(1);
        c.rounds = 3;
        c.participation = 0.5;
        let out = run_federated(&mut clients, &c, &Quadratic, &init, &run).unwrap();
        assert_eq!(out.bytes_exchanged(), (3 * 2 * 4, 3 * 2 * 4));
    }

    #[test]
    fn rounds_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let row = RoundTelemetry {
            round: 0,
            phase: "classifier".into(),
            global_loss: 0.5,
            bytes_up: 8,
            bytes_down: 8,
            wall_ms: 1,
        };
        append_rounds_csv(&path, std::slice::from_ref(&row)).unwrap();
        append_rounds_csv(&path, &[RoundTelemetry { round: 1, ..row.clone() }]).unwrap();
        let back = read_rounds_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], row);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,phase,global_loss,bytes_up,bytes_down,wall_ms"));
    }
}

//! Precision-optimized selection of pseudo-labeled data.
//!
//! Each client chooses per-class keep proportions `ρ ∈ [0, 1]^C` maximizing
//!
//! ```text
//! P̄(ρ) − w_l1·Σ|ρ_c| − w_p·(mean(ρ) − τ)²
//! ```
//!
//! where `P̄` is the average column precision of `M_l + M_p·diag(ρ)` over
//! its non-empty columns.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::pseudo::ConfusionMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ProjectedGradient,
    GridOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub w_l1: f64,
    pub w_p: f64,
    pub tau: f64,
    pub solver: SolverKind,
    /// Random starting points on top of `0`, `τ·1` and `1`.
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial step of the backtracking line search.
    pub step_size: f64,
    pub tolerance: f64,
    pub fd_step: f64,
    /// Spacing of the grid oracle.
    pub grid_step: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            w_l1: 0.01,
            w_p: 0.1,
            tau: 0.9,
            solver: SolverKind::ProjectedGradient,
            restarts: 4,
            max_iters: 200,
            step_size: 1.0,
            tolerance: 1e-9,
            fd_step: 1e-4,
            grid_step: 0.05,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_l1 < 0.0 || self.w_p < 0.0 {
            return Err(Error::invalid("selection weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.fd_step > 0.0 && self.step_size > 0.0 && self.grid_step > 0.0) {
            return Err(Error::invalid("solver steps must be positive"));
        }
        Ok(())
    }
}

/// Per-class kept proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionVector {
    pub rho: Vec<f64>,
}

impl SelectionVector {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("selection proportions must lie in [0, 1]"));
        }
        Ok(Self { rho })
    }

    pub fn keep_all(classes: usize) -> Self {
        Self {
            rho: vec![1.0; classes],
        }
    }
}

/// `M_l + M_p·diag(ρ)`.
pub fn mixed_confusion(
    labeled: &ConfusionMatrix,
    pseudo: &ConfusionMatrix,
    rho: &[f64],
) -> Result<ConfusionMatrix> {
    let c = labeled.classes();
    if pseudo.classes() != c || rho.len() != c {
        return Err(Error::DimensionMismatch {
            context: "mixed confusion",
            expected: c,
            found: if pseudo.classes() != c { pseudo.classes() } else { rho.len() },
        });
    }
    let mut out = labeled.clone();
    for j in 0..c {
        for i in 0..c {
            out.add(i, j, rho[j] * pseudo.get(i, j));
        }
    }
    Ok(out)
}

/// Mean of `M[j,j] / Σ_i M[i,j]` over columns with a nonzero sum.
pub fn average_precision(m: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for j in 0..m.classes() {
        let col = m.column_sum(j);
        if col != 0.0 {
            sum += m.get(j, j) / col;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedPrecision);
    }
    Ok(sum / used as f64)
}

pub fn selection_objective(
    rho: &[f64],
    labeled: &ConfusionMatrix,
    pseudo: &ConfusionMatrix,
    config: &SelectionConfig,
) -> Result<f64> {
    let precision = average_precision(&mixed_confusion(labeled, pseudo, rho)?)?;
    let l1: f64 = rho.iter().map(|r| r.abs()).sum();
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    Ok(precision - config.w_l1 * l1 - config.w_p * (mean - config.tau).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub step_size: f64,
    pub projected_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selection: SelectionVector,
    pub objective: f64,
    /// False when some restart hit `max_iters` before converging.
    pub converged: bool,
    pub iterations: usize,
    /// Iterates of the restart that produced the answer.
    pub trace: Vec<TraceRow>,
}

struct Problem<'a> {
    labeled: &'a ConfusionMatrix,
    pseudo: &'a ConfusionMatrix,
    config: &'a SelectionConfig,
}

impl Problem<'_> {
    /// Undefined precision counts as −∞ so the search steers away from it.
    fn value(&self, rho: &[f64]) -> f64 {
        selection_objective(rho, self.labeled, self.pseudo, self.config)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = self.config.fd_step;
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let hi = (x[i] + h).min(1.0);
                let lo = (x[i] - h).max(0.0);
                probe[i] = hi;
                let f_hi = self.value(&probe);
                probe[i] = lo;
                let f_lo = self.value(&probe);
                probe[i] = x[i];
                let f_mid = self.value(x);
                let g = match (f_hi.is_finite(), f_lo.is_finite()) {
                    (true, true) => (f_hi - f_lo) / (hi - lo),
                    (true, false) if hi > x[i] => (f_hi - f_mid) / (hi - x[i]),
                    (false, true) if lo < x[i] => (f_mid - f_lo) / (x[i] - lo),
                    _ => 0.0,
                };
                if g.is_finite() {
                    g
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Projected gradient ascent with Armijo backtracking from `start`.
    fn ascend(&self, start: &[f64]) -> (Vec<f64>, f64, bool, Vec<TraceRow>) {
        let cfg = self.config;
        let mut x = project(start);
        let mut f = self.value(&x);
        let mut trace = vec![TraceRow {
            iter: 0,
            objective: f,
            step_size: 0.0,
            projected_norm: 0.0,
        }];
        for iter in 1..=cfg.max_iters {
            let g = self.gradient(&x);
            let projected_norm = norm_diff(&project(&add_scaled(&x, &g, 1.0)), &x);
            if projected_norm <= cfg.tolerance {
                return (x, f, true, trace);
            }
            let mut step = cfg.step_size;
            let mut accepted = None;
            for _ in 0..40 {
                let candidate = project(&add_scaled(&x, &g, step));
                let moved: f64 = g.iter().zip(candidate.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
                let fc = self.value(&candidate);
                if fc.is_finite() && fc >= f + 1e-4 * moved && norm_diff(&candidate, &x) > 0.0 {
                    accepted = Some((candidate, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((next, f_next)) = accepted else {
                return (x, f, true, trace);
            };
            let delta = norm_diff(&next, &x);
            x = next;
            f = f_next;
            trace.push(TraceRow {
                iter,
                objective: f,
                step_size: step,
                projected_norm,
            });
            if delta <= cfg.tolerance {
                return (x, f, true, trace);
            }
        }
        (x, f, false, trace)
    }

    /// Greedy coordinate snapping to the box corners; catches the jumps at
    /// `ρ_j = 0` where a column leaves the precision average.
    fn polish(&self, mut x: Vec<f64>, mut f: f64) -> (Vec<f64>, f64) {
        for _ in 0..x.len() {
            let mut improved = false;
            for i in 0..x.len() {
                for corner in [0.0, 1.0] {
                    if x[i] == corner {
                        continue;
                    }
                    let old = x[i];
                    x[i] = corner;
                    let fc = self.value(&x);
                    if fc > f {
                        f = fc;
                        improved = true;
                    } else {
                        x[i] = old;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        (x, f)
    }

    fn grid(&self) -> Result<(Vec<f64>, f64)> {
        let c = self.labeled.classes();
        let steps = (1.0 / self.config.grid_step).round() as usize;
        let points = (steps + 1) as f64;
        if points.powi(c as i32) > 5e6 {
            return Err(Error::invalid(format!(
                "grid oracle with {c} classes and step {} is too large",
                self.config.grid_step
            )));
        }
        let mut index = vec![0usize; c];
        let mut best = (vec![0.0; c], f64::NEG_INFINITY);
        loop {
            let rho: Vec<f64> = index.iter().map(|&k| (k as f64 / steps as f64).min(1.0)).collect();
            let f = self.value(&rho);
            if f > best.1 {
                best = (rho, f);
            }
            let mut pos = 0;
            loop {
                if pos == c {
                    return Ok(best);
                }
                index[pos] += 1;
                if index[pos] <= steps {
                    break;
                }
                index[pos] = 0;
                pos += 1;
            }
        }
    }
}

fn project(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn add_scaled(x: &[f64], d: &[f64], s: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Best objective over a brute-force grid with spacing `config.grid_step`.
pub fn grid_oracle(
    labeled: &ConfusionMatrix,
    pseudo: &ConfusionMatrix,
    config: &SelectionConfig,
) -> Result<(SelectionVector, f64)> {
    let problem = Problem { labeled, pseudo, config };
    let (rho, f) = problem.grid()?;
    Ok((SelectionVector { rho }, f))
}

pub fn solve_selection(
    labeled: &ConfusionMatrix,
    pseudo: &ConfusionMatrix,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    solve_selection_with(labeled, pseudo, config, &Parallelism::sequential())
}

/// Maximizes the selection objective over the box. Restarts may run in
/// parallel; the best objective wins, ties going to the earliest restart.
pub fn solve_selection_with(
    labeled: &ConfusionMatrix,
    pseudo: &ConfusionMatrix,
    config: &SelectionConfig,
    parallelism: &Parallelism,
) -> Result<SelectionResult> {
    config.validate()?;
    let c = labeled.classes();
    if pseudo.classes() != c {
        return Err(Error::DimensionMismatch {
            context: "selection matrices",
            expected: c,
            found: pseudo.classes(),
        });
    }
    let problem = Problem { labeled, pseudo, config };
    if config.solver == SolverKind::GridOracle {
        let (rho, objective) = problem.grid()?;
        if !objective.is_finite() {
            return Err(Error::UndefinedPrecision);
        }
        return Ok(SelectionResult {
            selection: SelectionVector { rho },
            objective,
            converged: true,
            iterations: 0,
            trace: Vec::new(),
        });
    }

    let mut starts = vec![vec![0.0; c], vec![config.tau; c], vec![1.0; c]];
    for r in 0..config.restarts {
        let mut rng = rng::stream(config.seed, &[rng::tag("selection"), r as u64]);
        starts.push((0..c).map(|_| rng::unit(&mut rng)).collect());
    }
    let runs = parallelism.map(&starts, |s| problem.ascend(s));
    let converged = runs.iter().all(|r| r.2);
    let iterations = runs.iter().map(|r| r.3.len().saturating_sub(1)).sum();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.1 > runs[best].1 {
            best = i;
        }
    }
    let (x, f, _, trace) = runs.into_iter().nth(best).expect("at least three starts");
    let (rho, objective) = problem.polish(x, f);
    if !objective.is_finite() {
        return Err(Error::UndefinedPrecision);
    }
    if !converged {
        log::warn!("selection solver hit max_iters={} on some restart", config.max_iters);
    }
    Ok(SelectionResult {
        selection: SelectionVector { rho },
        objective,
        converged,
        iterations,
        trace,
    })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in trace {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Keeps `round(ρ_c·n_c)` uniformly chosen samples of each pseudo class, in
/// input order.
pub fn apply_selection(pseudo: &Dataset, selection: &SelectionVector, seed: u64) -> Result<Dataset> {
    if selection.rho.len() != pseudo.num_classes {
        return Err(Error::DimensionMismatch {
            context: "selection vector",
            expected: pseudo.num_classes,
            found: selection.rho.len(),
        });
    }
    let mut by_class = vec![Vec::new(); pseudo.num_classes];
    for (i, s) in pseudo.samples.iter().enumerate() {
        let c = s
            .label()
            .ok_or_else(|| Error::invalid("selection needs pseudo-labeled samples"))?;
        by_class[c].push(i);
    }
    let mut rng = rng::stream(seed, &[rng::tag("apply_selection")]);
    let mut keep = vec![false; pseudo.len()];
    for (c, mut members) in by_class.into_iter().enumerate() {
        let n_keep = ((selection.rho[c] * members.len() as f64 + 0.5).floor() as usize).min(members.len());
        members.shuffle(&mut rng);
        for &i in &members[..n_keep] {
            keep[i] = true;
        }
    }
    let mut out = pseudo.empty_like(format!("{}_selected", pseudo.name));
    out.samples = pseudo
        .samples
        .iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(out)
}

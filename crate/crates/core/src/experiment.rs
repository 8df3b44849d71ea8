//! Monte-Carlo comparison of the Kalman filter, exact online MHE and the
//! certified learned estimator.
//!
//! Per-step RMSE is taken across runs, `RMSE_t = √(mean_r ‖x̂_t − x_t‖²)`;
//! ARMSE is the average of `RMSE_t` over `t ≥ armse_from`. Runs execute in
//! parallel and are merged in seed order, so every number except the
//! timings is reproducible bit for bit.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::approximator::dataset::instance_at;
use crate::certify::{pd_mhe_step, DualEstimator, GapCheck, PrimalEstimator, Provenance};
use crate::config::{ExperimentConfig, Scenario};
use crate::mhe::{kalman_step, solve_primal_detailed, ArrivalCost};
use crate::model::{simulate_trajectory, window_start, Trajectory};
use crate::qp::QpSettings;
use crate::stability::AuditedEstimate;
use crate::Result;

/// Offsets that keep the seed streams of the pipeline stages disjoint. Each
/// stage draws seeds `base + offset + k` for `k < 2^40`.
pub mod seeds {
    pub const TRAIN: u64 = 1 << 40;
    pub const CALIBRATE: u64 = 2 << 40;
    pub const VERIFY: u64 = 3 << 40;
    pub const TEST: u64 = 4 << 40;
    pub const RUNS: u64 = 5 << 40;

    /// The stage a seed belongs to, given the base it was offset from.
    pub fn stage(seed: u64, base: u64) -> Option<&'static str> {
        match seed.wrapping_sub(base) >> 40 {
            1 => Some("train"),
            2 => Some("calibrate"),
            3 => Some("verify"),
            4 => Some("test"),
            5 => Some("runs"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EstimatorKind {
    #[serde(rename = "KF")]
    Kf,
    #[serde(rename = "MHE")]
    Mhe,
    #[serde(rename = "PD-MHE")]
    PdMhe,
    /// Noise-free prediction from `x̂_0` that ignores every measurement; a
    /// negative control for the stability audit.
    #[serde(rename = "open-loop")]
    OpenLoop,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Kf => "KF",
            EstimatorKind::Mhe => "MHE",
            EstimatorKind::PdMhe => "PD-MHE",
            EstimatorKind::OpenLoop => "open-loop",
        })
    }
}

/// The learned pair and its acceptance threshold.
#[derive(Clone, Copy)]
pub struct LearnedPair<'a> {
    pub primal: &'a dyn PrimalEstimator,
    pub dual: &'a dyn DualEstimator,
    pub delta: f64,
}

/// Everything one estimator produced along one trajectory. Index `t` runs
/// over `0..=T`; entry `0` is the initial guess.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub seed: u64,
    pub kind: EstimatorKind,
    pub estimates: Vec<DVector<f64>>,
    /// Arrival (or covariance) weight attached to each estimate.
    pub weights: Vec<DMatrix<f64>>,
    pub provenance: Vec<Provenance>,
    pub gaps: Vec<Option<GapCheck>>,
    /// Wall time of steps `1..=T`.
    pub step_times: Vec<Duration>,
    pub errors: Vec<f64>,
}

impl RunTrace {
    fn new(seed: u64, kind: EstimatorKind, x0_hat: &DVector<f64>, weight: &DMatrix<f64>) -> Self {
        Self {
            seed,
            kind,
            estimates: vec![x0_hat.clone()],
            weights: vec![weight.clone()],
            provenance: vec![Provenance::Backup],
            gaps: vec![None],
            step_times: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn finish(mut self, states: &[DVector<f64>]) -> Self {
        self.errors = self.estimates.iter().zip(states).map(|(e, x)| (e - x).norm()).collect();
        self
    }

    /// `(rejected, checked)` over the gap-checked steps.
    pub fn rejections(&self) -> (usize, usize) {
        let checked = self.gaps.iter().filter(|g| g.is_some()).count();
        let rejected = self
            .gaps
            .iter()
            .zip(&self.provenance)
            .filter(|(g, p)| g.is_some() && **p == Provenance::Backup)
            .count();
        (rejected, checked)
    }

    /// Input for [`crate::stability::audit_trajectory`].
    pub fn audited(&self) -> Vec<AuditedEstimate> {
        self.estimates
            .iter()
            .zip(&self.weights)
            .zip(&self.provenance)
            .map(|((e, w), p)| AuditedEstimate { estimate: e.clone(), weight: w.clone(), provenance: p.to_string() })
            .collect()
    }
}

/// Prediction-form Kalman filter started from `(x̂_0, P_0)`.
pub fn run_kf(scenario: &Scenario, traj: &Trajectory) -> Result<RunTrace> {
    let mut out = RunTrace::new(traj.seed, EstimatorKind::Kf, &scenario.x0_hat, &scenario.p0);
    let mut x = scenario.x0_hat.clone();
    let mut cov = ArrivalCost { p: scenario.p0.clone(), t: 0 };
    let (q, r) = (scenario.noise.q(), scenario.noise.r());
    for t in 1..=traj.measurements.len() {
        let clock = Instant::now();
        let (a, c) = (scenario.model.a(t - 1), scenario.model.c(t - 1));
        (x, cov) = kalman_step(&x, &cov, &traj.measurements[t - 1], a, c, q, r)?;
        out.step_times.push(clock.elapsed());
        out.estimates.push(x.clone());
        out.weights.push(cov.p.clone());
        out.provenance.push(Provenance::Backup);
        out.gaps.push(None);
    }
    Ok(out.finish(&traj.states))
}

pub fn run_open_loop(scenario: &Scenario, traj: &Trajectory) -> Result<RunTrace> {
    let mut out = RunTrace::new(traj.seed, EstimatorKind::OpenLoop, &scenario.x0_hat, scenario.arrival_at(0));
    for t in 1..=traj.measurements.len() {
        let clock = Instant::now();
        let next = scenario.model.a(t - 1) * &out.estimates[t - 1];
        out.step_times.push(clock.elapsed());
        out.estimates.push(next);
        out.weights.push(scenario.arrival_at(window_start(t, scenario.horizon)).clone());
        out.provenance.push(Provenance::Backup);
        out.gaps.push(None);
    }
    Ok(out.finish(&traj.states))
}

/// Exact online MHE with a cold-started solver at every step.
pub fn run_mhe(scenario: &Scenario, traj: &Trajectory) -> Result<RunTrace> {
    let mut out = RunTrace::new(traj.seed, EstimatorKind::Mhe, &scenario.x0_hat, scenario.arrival_at(0));
    for t in 1..=traj.measurements.len() {
        let clock = Instant::now();
        let start = window_start(t, scenario.horizon);
        let inst = instance_at(scenario, &traj.measurements, &out.estimates[start], t)?;
        let sol = solve_primal_detailed(&inst, &QpSettings::default())?.solution;
        out.step_times.push(clock.elapsed());
        out.estimates.push(sol.estimate().clone());
        out.weights.push(scenario.arrival_at(start).clone());
        out.provenance.push(Provenance::Backup);
        out.gaps.push(None);
    }
    Ok(out.finish(&traj.states))
}

/// The certified estimator along one trajectory.
pub fn run_pd(scenario: &Scenario, traj: &Trajectory, pair: LearnedPair<'_>) -> Result<RunTrace> {
    let mut out = RunTrace::new(traj.seed, EstimatorKind::PdMhe, &scenario.x0_hat, scenario.arrival_at(0));
    for t in 1..=traj.measurements.len() {
        let rec = pd_mhe_step(scenario, &traj.measurements, &out.estimates, t, pair.primal, pair.dual, pair.delta)?;
        out.step_times.push(rec.elapsed);
        out.estimates.push(rec.estimate);
        out.weights.push(rec.weight);
        out.provenance.push(rec.provenance);
        out.gaps.push(rec.gap);
    }
    Ok(out.finish(&traj.states))
}

/// All traces of one Monte-Carlo run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub traces: Vec<RunTrace>,
}

/// Seed of Monte-Carlo run `k`.
pub fn run_seed(cfg: &ExperimentConfig, k: usize) -> u64 {
    cfg.seed.wrapping_add(seeds::RUNS).wrapping_add(k as u64)
}

/// Simulates `cfg.runs` trajectories and runs the requested estimators on
/// each. PD-MHE is included when `pair` is given.
pub fn monte_carlo(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    kinds: &[EstimatorKind],
    pair: Option<LearnedPair<'_>>,
) -> Result<Vec<RunResult>> {
    (0..cfg.runs)
        .into_par_iter()
        .map(|k| {
            let seed = run_seed(cfg, k);
            let trajectory = simulate_trajectory(&scenario.model, &scenario.noise, &scenario.x0, cfg.steps, seed)?;
            let mut traces = Vec::with_capacity(kinds.len());
            for kind in kinds {
                traces.push(match kind {
                    EstimatorKind::Kf => run_kf(scenario, &trajectory)?,
                    EstimatorKind::Mhe => run_mhe(scenario, &trajectory)?,
                    EstimatorKind::OpenLoop => run_open_loop(scenario, &trajectory)?,
                    EstimatorKind::PdMhe => match pair {
                        Some(p) => run_pd(scenario, &trajectory, p)?,
                        None => continue,
                    },
                });
            }
            Ok(RunResult { trajectory, traces })
        })
        .collect()
}

fn traces_of(results: &[RunResult], kind: EstimatorKind) -> Vec<&RunTrace> {
    results.iter().flat_map(|r| r.traces.iter().filter(|t| t.kind == kind)).collect()
}

/// `RMSE_t` for `t = 0..=T`.
pub fn rmse_per_step(traces: &[&RunTrace]) -> Vec<f64> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    let count = traces.len() as f64;
    (0..first.errors.len())
        .map(|t| (traces.iter().map(|r| r.errors[t].powi(2)).sum::<f64>() / count).sqrt())
        .collect()
}

/// Average of `RMSE_t` over `t ≥ from`.
pub fn armse(rmse: &[f64], from: usize) -> f64 {
    let tail = &rmse[from.min(rmse.len())..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

pub fn median(mut v: Vec<Duration>) -> Duration {
    if v.is_empty() {
        return Duration::ZERO;
    }
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub estimator: EstimatorKind,
    pub armse: f64,
    pub median_step_us: f64,
    pub backup_fraction: f64,
}

/// One summary row per estimator present in `results`.
pub fn summarize(results: &[RunResult], armse_from: usize) -> Vec<BenchRow> {
    let mut kinds: Vec<EstimatorKind> = results.iter().flat_map(|r| r.traces.iter().map(|t| t.kind)).collect();
    kinds.sort();
    kinds.dedup();
    kinds
        .into_iter()
        .map(|kind| {
            let traces = traces_of(results, kind);
            let times: Vec<Duration> = traces.iter().flat_map(|t| t.step_times.iter().copied()).collect();
            let (rej, checked) =
                traces.iter().map(|t| t.rejections()).fold((0, 0), |(a, b), (r, c)| (a + r, b + c));
            BenchRow {
                estimator: kind,
                armse: armse(&rmse_per_step(&traces), armse_from),
                median_step_us: median(times).as_secs_f64() * 1e6,
                backup_fraction: if kind == EstimatorKind::PdMhe { rej as f64 / checked.max(1) as f64 } else { 0.0 },
            }
        })
        .collect()
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "estimator,armse,median_step_us,backup_fraction")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:e}", r.estimator, r.armse, r.median_step_us, r.backup_fraction)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct PlotRow {
    pub t: usize,
    pub estimator: EstimatorKind,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Per-step RMSE with a 95% band: a normal interval on the mean squared
/// error across runs, mapped through the square root. A single run gives a
/// degenerate band.
pub fn plot_rows(results: &[RunResult]) -> Vec<PlotRow> {
    let mut kinds: Vec<EstimatorKind> = results.iter().flat_map(|r| r.traces.iter().map(|t| t.kind)).collect();
    kinds.sort();
    kinds.dedup();
    let mut rows = Vec::new();
    for kind in kinds {
        let traces = traces_of(results, kind);
        let count = traces.len() as f64;
        for t in 0..traces[0].errors.len() {
            let sq: Vec<f64> = traces.iter().map(|r| r.errors[t].powi(2)).collect();
            let mse = sq.iter().sum::<f64>() / count;
            let half = if traces.len() > 1 {
                let var = sq.iter().map(|v| (v - mse).powi(2)).sum::<f64>() / (count - 1.0);
                1.96 * (var / count).sqrt()
            } else {
                0.0
            };
            rows.push(PlotRow {
                t,
                estimator: kind,
                mean: mse.sqrt(),
                lo95: (mse - half).max(0.0).sqrt(),
                hi95: (mse + half).sqrt(),
            });
        }
    }
    rows
}

pub fn write_plot_csv<W: std::io::Write>(rows: &[PlotRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,estimator,mean,lo95,hi95")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e},{:e}", r.t, r.estimator, r.mean, r.lo95, r.hi95)?;
    }
    Ok(())
}

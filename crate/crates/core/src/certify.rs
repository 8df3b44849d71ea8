//! Certification of the learned estimators.
//!
//! Offline, a fixed number of fresh instances (enough that one unseen failure
//! mode of probability `ε` would show up with confidence `1 − β`) must all be
//! solved within the suboptimality levels `Δ_p` / `Δ_d`. Online, the primal
//! guess is accepted only if its cost exceeds the dual guess's value by at
//! most `Δ`; weak duality then bounds its true suboptimality by `Δ`. When the
//! check fails the exact solver supplies the estimate instead.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::dataset::{instance_at, Sample};
use crate::approximator::{Surrogate, TargetKind};
use crate::config::{CertifyConfig, Scenario};
use crate::dual::{solve_dual_from, AscentSettings, DualProblem};
use crate::mhe::{solve_primal_detailed, MheInstance, PrimalSolution, TOL_FEAS};
use crate::model::{window_start, ConvexSet};
use crate::qp::QpSettings;
use crate::{Error, Result};

/// Smallest `N` with `(1 − ε)^N ≤ β`: `⌈ln(1/β) / ln(1/(1−ε))⌉`.
pub fn min_sample_size(eps: f64, beta: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("ε = {eps}, β = {beta} must both lie in (0, 1)")));
    }
    // ln_1p keeps precision for small ε
    Ok(((1.0 / beta).ln() / -(-eps).ln_1p()).ceil() as usize)
}

/// Violation probabilities, confidences and suboptimality levels of both
/// branches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertBudget {
    pub eps_p: f64,
    pub eps_d: f64,
    pub beta_p: f64,
    pub beta_d: f64,
    pub delta_p: f64,
    pub delta_d: f64,
    pub delta_gap: f64,
}

impl CertBudget {
    pub fn new(
        (eps_p, eps_d): (f64, f64),
        (beta_p, beta_d): (f64, f64),
        (delta_p, delta_d, delta_gap): (f64, f64, f64),
    ) -> Result<Self> {
        for (v, what) in [(eps_p, "eps_p"), (eps_d, "eps_d")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain(format!("{what} = {v} outside [0, 1)")));
            }
        }
        for (v, what) in [(beta_p, "beta_p"), (beta_d, "beta_d")] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{what} = {v} outside (0, 1)")));
            }
        }
        if [delta_p, delta_d, delta_gap].iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Domain("suboptimality levels must be nonnegative".into()));
        }
        Ok(Self { eps_p, eps_d, beta_p, beta_d, delta_p, delta_d, delta_gap })
    }

    /// Splits `ε` and `β` with `share` going to the primal branch.
    pub fn split(eps: f64, beta: f64, share: f64, delta_p: f64, delta_d: f64, delta_gap: f64) -> Result<Self> {
        if !(share > 0.0 && share < 1.0) {
            return Err(Error::Domain(format!("primal share {share} outside (0, 1)")));
        }
        Self::new(
            (eps * share, eps * (1.0 - share)),
            (beta * share, beta * (1.0 - share)),
            (delta_p, delta_d, delta_gap),
        )
    }

    pub fn from_config(c: &CertifyConfig) -> Result<Self> {
        Self::split(c.eps, c.beta, c.primal_share, c.delta_p, c.delta_d, c.delta_gap)
    }

    /// Online threshold `Δ = Δ_p + Δ_d + Δ_gap`.
    pub fn delta(&self) -> f64 {
        self.delta_p + self.delta_d + self.delta_gap
    }

    pub fn primal_samples(&self) -> Result<usize> {
        min_sample_size(self.eps_p, self.beta_p)
    }

    pub fn dual_samples(&self) -> Result<usize> {
        min_sample_size(self.eps_d, self.beta_d)
    }
}

/// `(ε_p + ε_d, β_p + β_d, Δ_p + Δ_d + Δ_gap)`.
pub fn violation_budget(b: &CertBudget) -> (f64, f64, f64) {
    (b.eps_p + b.eps_d, b.beta_p + b.beta_d, b.delta())
}

/// Anything that proposes `(x̂_{t−M}, ξ̂)` for an instance.
pub trait PrimalEstimator: Sync {
    fn name(&self) -> String;
    fn guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)>;
}

/// Anything that proposes multipliers `μ` for an instance.
pub trait DualEstimator: Sync {
    fn name(&self) -> String;
    fn guess(&self, inst: &MheInstance) -> Result<Vec<DVector<f64>>>;
}

/// The QP solver wrapped as an estimator.
pub struct ExactPrimal;

impl PrimalEstimator for ExactPrimal {
    fn name(&self) -> String {
        "exact".into()
    }

    fn guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let s = solve_primal_detailed(inst, &QpSettings::default())?.solution;
        Ok((s.x0_hat, s.xi_hat))
    }
}

/// Always outputs the zero decision vector.
pub struct ZeroPrimal;

impl PrimalEstimator for ZeroPrimal {
    fn name(&self) -> String {
        "zero".into()
    }

    fn guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        Ok((DVector::zeros(inst.n()), vec![DVector::zeros(inst.n()); inst.window()]))
    }
}

/// Ignores the measurements: keeps the prior and predicts without noise.
pub struct PriorHold;

impl PrimalEstimator for PriorHold {
    fn name(&self) -> String {
        "prior-hold".into()
    }

    fn guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        Ok((inst.iv.prior_estimate.clone(), vec![DVector::zeros(inst.n()); inst.window()]))
    }
}

/// Dual ascent warm-started from the primal solver's multipliers.
pub struct ExactDual;

impl DualEstimator for ExactDual {
    fn name(&self) -> String {
        "exact".into()
    }

    fn guess(&self, inst: &MheInstance) -> Result<Vec<DVector<f64>>> {
        let solve = solve_primal_detailed(inst, &QpSettings::default())?;
        let warm = DualProblem::new(inst)?.multipliers_from_primal(&solve);
        Ok(solve_dual_from(inst, &warm, &AscentSettings::default())?.mu)
    }
}

pub struct ZeroDual;

impl DualEstimator for ZeroDual {
    fn name(&self) -> String {
        "zero".into()
    }

    fn guess(&self, inst: &MheInstance) -> Result<Vec<DVector<f64>>> {
        Ok(vec![DVector::zeros(inst.m()); inst.window()])
    }
}

impl PrimalEstimator for Surrogate {
    fn name(&self) -> String {
        format!("learned-{}", self.kind)
    }

    fn guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        self.primal_guess(inst)
    }
}

impl DualEstimator for Surrogate {
    fn name(&self) -> String {
        format!("learned-{}", self.kind)
    }

    fn guess(&self, inst: &MheInstance) -> Result<Vec<DVector<f64>>> {
        self.dual_guess(inst)
    }
}

/// A primal guess after feasibility repair.
#[derive(Clone, Debug)]
pub struct Restored {
    pub solution: PrimalSolution,
    /// Largest constraint violation of the raw guess.
    pub pre_violation: f64,
}

/// Pushes a primal guess into the feasible set.
///
/// Process noise is clamped onto its box. The measurement noise
/// `ζ_k = y_k − C_k x_k` is not a decision variable, so it is repaired stage
/// by stage: a violation at `k = 0` moves `x̂_{t−M}` by the least-norm
/// correction that puts `ζ_0` on its box, and a violation at `k ≥ 1` moves
/// `ξ̂_{k−1}` the same way. When such a move pushes `ξ̂_{k−1}` off its own box
/// the guess stays infeasible (`solution.feasible == false`).
pub fn restore_feasibility(inst: &MheInstance, x0: &DVector<f64>, xi: &[DVector<f64>]) -> Result<Restored> {
    let pre_violation = inst.violation(&inst.rollout(x0, xi)?);
    let iv = &inst.iv;
    let mut x0 = x0.clone();
    let mut xi: Vec<DVector<f64>> = xi.iter().map(|v| inst.xi_set.project(v)).collect();
    let mut x = x0.clone();
    for k in 0..inst.window() {
        let c = &iv.window_measurement_maps[k];
        let zeta = &iv.window_measurements[k] - c * &x;
        let target = inst.zeta_set.project(&zeta);
        let miss = &zeta - &target;
        if miss.amax() > 0.0 {
            let Some(cct_inv) = (c * c.transpose()).try_inverse() else {
                break;
            };
            let fix = c.transpose() * cct_inv * miss;
            if k == 0 {
                x0 += &fix;
                x += &fix;
            } else {
                xi[k - 1] += &fix;
                x += &fix;
            }
        }
        x = &iv.window_dynamics[k] * &x + &xi[k];
    }
    let solution = inst.rollout(&x0, &xi)?;
    Ok(Restored { solution, pre_violation })
}

/// One verification sample.
#[derive(Clone, Debug, Serialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub seed: u64,
    pub t: usize,
    pub v_hat: f64,
    pub v_star: f64,
    pub excess: f64,
    pub feasible: bool,
    pub g_hat: f64,
    pub g_star: f64,
    pub shortfall: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub kind: TargetKind,
    pub estimator: String,
    pub required: usize,
    pub samples: usize,
    pub level: f64,
    pub passed: bool,
    pub failures: usize,
    pub worst_excess: f64,
    pub worst_shortfall: f64,
    pub infeasible: usize,
    /// Smallest and largest sample seed, for disjointness audits.
    pub seed_range: (u64, u64),
    #[serde(skip)]
    pub rows: Vec<SampleRecord>,
}

impl VerificationReport {
    fn build(
        kind: TargetKind,
        estimator: String,
        required: usize,
        level: f64,
        rows: Vec<SampleRecord>,
    ) -> Self {
        let failures = rows.iter().filter(|r| !r.ok).count();
        let lo = rows.iter().map(|r| r.seed).min().unwrap_or(0);
        let hi = rows.iter().map(|r| r.seed).max().unwrap_or(0);
        Self {
            kind,
            estimator,
            required,
            samples: rows.len(),
            level,
            passed: failures == 0,
            failures,
            worst_excess: rows.iter().map(|r| r.excess).filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max),
            worst_shortfall: rows.iter().map(|r| r.shortfall).filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max),
            infeasible: rows.iter().filter(|r| !r.feasible).count(),
            seed_range: (lo, hi),
            rows,
        }
    }

    /// Fraction of samples that failed their check.
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.samples.max(1) as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "sample_id,V_hat,V_star,excess,feasible,G_hat,G_star,shortfall")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{},{:e},{:e},{:e}",
                r.sample_id, r.v_hat, r.v_star, r.excess, r.feasible, r.g_hat, r.g_star, r.shortfall
            )?;
        }
        Ok(())
    }
}

fn check_count(samples: &[Sample], required: usize) -> Result<()> {
    if samples.len() < required {
        return Err(Error::InsufficientSamples { required, got: samples.len() });
    }
    Ok(())
}

/// Primal record for one sample without the sample-size requirement.
pub fn primal_record(est: &dyn PrimalEstimator, id: usize, s: &Sample, delta_p: f64) -> Result<SampleRecord> {
    let (x0, xi) = est.guess(&s.inst)?;
    let restored = restore_feasibility(&s.inst, &x0, &xi)?;
    let v_hat = restored.solution.cost;
    let v_star = s.primal.cost;
    let excess = v_hat - v_star;
    let feasible = restored.solution.feasible;
    Ok(SampleRecord {
        sample_id: id,
        seed: s.meta.seed,
        t: s.meta.t,
        v_hat,
        v_star,
        excess,
        feasible,
        g_hat: f64::NAN,
        g_star: f64::NAN,
        shortfall: f64::NAN,
        ok: feasible && excess <= delta_p,
    })
}

/// Dual record for one sample; the sample must carry its dual optimum.
pub fn dual_record(est: &dyn DualEstimator, id: usize, s: &Sample, delta_d: f64) -> Result<SampleRecord> {
    let g_star = s.dual_value.ok_or_else(|| Error::Domain("sample has no dual optimum".into()))?;
    let mu = est.guess(&s.inst)?;
    let g_hat = DualProblem::new(&s.inst)?.value(&mu)?;
    let shortfall = g_star - g_hat;
    Ok(SampleRecord {
        sample_id: id,
        seed: s.meta.seed,
        t: s.meta.t,
        v_hat: f64::NAN,
        v_star: s.primal.cost,
        excess: f64::NAN,
        feasible: true,
        g_hat,
        g_star,
        shortfall,
        ok: shortfall <= delta_d,
    })
}

/// Checks feasibility and `V(X̂) ≤ V(X̂*) + Δ_p` on every sample.
pub fn verify_primal(est: &dyn PrimalEstimator, budget: &CertBudget, samples: &[Sample]) -> Result<VerificationReport> {
    let required = budget.primal_samples()?;
    check_count(samples, required)?;
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| primal_record(est, i, s, budget.delta_p))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport::build(TargetKind::Primal, est.name(), required, budget.delta_p, rows))
}

/// Checks `G(μ̂) ≥ G(μ*) − Δ_d` on every sample.
pub fn verify_dual(est: &dyn DualEstimator, budget: &CertBudget, samples: &[Sample]) -> Result<VerificationReport> {
    let required = budget.dual_samples()?;
    check_count(samples, required)?;
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| dual_record(est, i, s, budget.delta_d))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport::build(TargetKind::Dual, est.name(), required, budget.delta_d, rows))
}

/// Suboptimality levels read off a calibration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub samples: usize,
    pub margin: f64,
    pub worst_excess: f64,
    pub worst_shortfall: f64,
    pub infeasible: usize,
    pub delta_p: f64,
    pub delta_d: f64,
}

/// Sets `Δ_p` and `Δ_d` to `margin` times the worst excess and shortfall
/// seen on `samples`. The calibration samples must not be reused for
/// verification, or the sample-size argument no longer applies.
pub fn calibrate(
    primal: &dyn PrimalEstimator,
    dual: &dyn DualEstimator,
    samples: &[Sample],
    margin: f64,
) -> Result<Calibration> {
    if samples.is_empty() || !(margin >= 1.0) {
        return Err(Error::Domain("calibration needs samples and a margin of at least 1".into()));
    }
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok((primal_record(primal, i, s, 0.0)?, dual_record(dual, i, s, 0.0)?)))
        .collect::<Result<Vec<_>>>()?;
    let worst_excess = rows.iter().filter(|(p, _)| p.feasible).map(|(p, _)| p.excess).fold(0.0, f64::max);
    let worst_shortfall = rows.iter().map(|(_, d)| d.shortfall).fold(0.0, f64::max);
    Ok(Calibration {
        samples: samples.len(),
        margin,
        worst_excess,
        worst_shortfall,
        infeasible: rows.iter().filter(|(p, _)| !p.feasible).count(),
        delta_p: margin * worst_excess,
        delta_d: margin * worst_shortfall,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapCheck {
    pub accept: bool,
    pub primal_cost: f64,
    pub dual_value: f64,
    pub gap: f64,
}

/// Accepts iff the primal guess is feasible and `V(primal) − G(μ) ≤ Δ`.
pub fn online_gap_check(inst: &MheInstance, primal: &PrimalSolution, mu: &[DVector<f64>], delta: f64) -> Result<GapCheck> {
    let dual_value = DualProblem::new(inst)?.value(mu)?;
    let gap = primal.cost - dual_value;
    let feasible = inst.violation(primal) <= TOL_FEAS;
    Ok(GapCheck { accept: feasible && gap <= delta, primal_cost: primal.cost, dual_value, gap })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Learned,
    Backup,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Learned => "learned",
            Provenance::Backup => "backup",
        })
    }
}

/// One emitted estimate.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub estimate: DVector<f64>,
    pub provenance: Provenance,
    /// `None` during start-up (`t < M_t`), where the solver runs unconditionally.
    pub gap: Option<GapCheck>,
    /// Arrival weight of the window that produced the estimate.
    pub weight: DMatrix<f64>,
    pub elapsed: Duration,
}

/// One step of the certified runtime estimator.
///
/// `history[s]` is the estimate emitted at time `s < t`. Full windows try the
/// learned pair first and fall back to the exact solver on rejection;
/// start-up windows always use the solver.
pub fn pd_mhe_step(
    scenario: &Scenario,
    measurements: &[DVector<f64>],
    history: &[DVector<f64>],
    t: usize,
    primal: &dyn PrimalEstimator,
    dual: &dyn DualEstimator,
    delta: f64,
) -> Result<StepRecord> {
    let clock = Instant::now();
    let start = window_start(t, scenario.horizon);
    let inst = instance_at(scenario, measurements, &history[start], t)?;
    let weight = scenario.arrival_at(start).clone();
    let mut gap = None;
    if inst.window() == scenario.horizon {
        let (x0, xi) = primal.guess(&inst)?;
        let restored = restore_feasibility(&inst, &x0, &xi)?;
        let mu = dual.guess(&inst)?;
        let check = online_gap_check(&inst, &restored.solution, &mu, delta)?;
        gap = Some(check);
        if check.accept {
            return Ok(StepRecord {
                t,
                estimate: restored.solution.estimate().clone(),
                provenance: Provenance::Learned,
                gap,
                weight,
                elapsed: clock.elapsed(),
            });
        }
    }
    let backup = solve_primal_detailed(&inst, &QpSettings::default())?.solution;
    Ok(StepRecord {
        t,
        estimate: backup.estimate().clone(),
        provenance: Provenance::Backup,
        gap,
        weight,
        elapsed: clock.elapsed(),
    })
}

/// Runs the certified estimator over a whole measurement record. The first
/// record is the initial guess at `t = 0`.
pub fn run_pd_mhe(
    scenario: &Scenario,
    measurements: &[DVector<f64>],
    primal: &dyn PrimalEstimator,
    dual: &dyn DualEstimator,
    delta: f64,
) -> Result<Vec<StepRecord>> {
    let mut history = vec![scenario.x0_hat.clone()];
    let mut out = vec![StepRecord {
        t: 0,
        estimate: scenario.x0_hat.clone(),
        provenance: Provenance::Backup,
        gap: None,
        weight: scenario.arrival_at(0).clone(),
        elapsed: Duration::ZERO,
    }];
    for t in 1..=measurements.len() {
        let rec = pd_mhe_step(scenario, measurements, &history, t, primal, dual, delta)?;
        history.push(rec.estimate.clone());
        out.push(rec);
    }
    Ok(out)
}

/// Share of checked steps that fell back to the solver.
pub fn reject_rate(records: &[StepRecord]) -> (usize, usize) {
    let checked = records.iter().filter(|r| r.gap.is_some());
    let total = checked.clone().count();
    let rejected = checked.filter(|r| r.provenance == Provenance::Backup).count();
    (rejected, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::dataset::solve_samples;
    use crate::config::Config;

    #[test]
    fn sample_sizes() {
        assert_eq!(min_sample_size(0.5, 0.5).unwrap(), 1);
        assert_eq!(min_sample_size(0.05, 1e-6).unwrap(), 270);
        assert_eq!(min_sample_size(0.01, 1e-6).unwrap(), 1375);
        assert_eq!(min_sample_size(0.025, 5e-7).unwrap(), 574);
        assert!(min_sample_size(0.0, 0.1).is_err());
        assert!(min_sample_size(0.1, 1.0).is_err());
    }

    #[test]
    fn budget_sums() {
        let b = CertBudget::split(0.05, 1e-6, 0.5, 0.2, 0.3, 0.0).unwrap();
        let (e, beta, d) = violation_budget(&b);
        assert!((e - 0.05).abs() < 1e-15 && (beta - 1e-6).abs() < 1e-21 && (d - 0.5).abs() < 1e-15);
        let b = CertBudget::split(0.05, 1e-6, 0.5, 0.2, 0.3, 0.1).unwrap();
        assert!((b.delta() - 0.6).abs() < 1e-15);
        assert!(CertBudget::split(0.05, 1e-6, 1.0, 0.2, 0.3, 0.0).is_err());
        assert!(CertBudget::split(0.05, 1e-6, 0.5, -0.2, 0.3, 0.0).is_err());
    }

    #[test]
    fn gap_check_thresholds() {
        let sc = Config::example().scenario().unwrap();
        let samples = solve_samples(&sc, 1, 77, true).unwrap();
        let s = &samples[0];
        let g = DualProblem::new(&s.inst).unwrap().value(s.mu.as_ref().unwrap()).unwrap();
        let check = online_gap_check(&s.inst, &s.primal, s.mu.as_ref().unwrap(), 1e-6).unwrap();
        assert!(check.gap.abs() <= 1e-6, "gap {}", check.gap);
        assert!(check.accept);
        let zero_mu = vec![DVector::zeros(1); s.inst.window()];
        let loose = online_gap_check(&s.inst, &s.primal, &zero_mu, 0.0).unwrap();
        assert!(!loose.accept && loose.gap > 0.0);
        assert!((check.dual_value - g).abs() < 1e-12);
    }

    #[test]
    fn restore_repairs_measurement_violations() {
        let sc = Config::example().scenario().unwrap();
        let s = &solve_samples(&sc, 1, 5, false).unwrap()[0];
        // lowering the position makes ζ = y − x¹ positive, and negative ξ
        // leaves its box
        let mut x0 = s.primal.x0_hat.clone();
        x0[0] -= 3.0;
        let xi: Vec<_> = s.primal.xi_hat.iter().map(|v| v.map(|e| e - 0.05)).collect();
        let r = restore_feasibility(&s.inst, &x0, &xi).unwrap();
        assert!(r.pre_violation > 1.0);
        assert!(r.solution.feasible, "violation {}", s.inst.violation(&r.solution));
        let exact = restore_feasibility(&s.inst, &s.primal.x0_hat, &s.primal.xi_hat).unwrap();
        assert!((exact.solution.cost - s.primal.cost).abs() < 1e-9);
    }
}

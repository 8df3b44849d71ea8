//! The constrained moving-horizon estimation problem.
//!
//! At time `t` the estimator picks the window's initial state and process
//! noise sequence; states and measurement noise follow from
//!
//! ```text
//! x̂_{i+1} = A_i x̂_i + ξ̂_i,      ζ̂_i = y_i − C_i x̂_i
//! ```
//!
//! and the cost is the discounted arrival/noise quadratic
//!
//! ```text
//! γ^M ‖x̂_{t−M} − x̂*_{t−M}‖²_{P⁻¹} + Σ_i γ^{t−i−1} (‖ξ̂_i‖²_{Q⁻¹} + ‖ζ̂_i‖²_{R⁻¹})
//! ```
//!
//! with `ξ̂_i`, `ζ̂_i` restricted to their boxes. Measurement noise is
//! eliminated, so the QP is over `(x̂_{t−M}, ξ̂)` only.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{check_spd, quad, spd_inverse, sym_condition, symmetrize};
use crate::model::{BoxSet, ConvexSet, InfoVector, NoiseSpec};
use crate::qp::{solve_qp, solve_qp_warm, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::{Error, Result};

/// Per-coordinate feasibility tolerance.
pub const TOL_FEAS: f64 = 1e-8;

/// Innovation covariances worse conditioned than this are treated as singular.
const MAX_INNOVATION_CONDITION: f64 = 1e14;

/// One windowed MHE problem.
#[derive(Clone, Debug)]
pub struct MheInstance {
    pub iv: InfoVector,
    pub gamma: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub p_inv: DMatrix<f64>,
    pub xi_set: BoxSet,
    pub zeta_set: BoxSet,
}

impl MheInstance {
    /// `gamma` must lie in `[0, 1]`; `1` is accepted for the undiscounted
    /// problem even though the stability analysis needs `gamma < 1`.
    pub fn new(iv: InfoVector, noise: &NoiseSpec, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Domain(format!("discount factor {gamma} outside [0, 1]")));
        }
        let n = iv.n();
        let m = iv.m();
        if noise.q().nrows() != n || noise.r().nrows() != m {
            return Err(Error::DimensionMismatch("noise spec does not match the window".into()));
        }
        check_spd(&iv.prior_weight, "arrival weight")?;
        let q_inv = spd_inverse(noise.q())?;
        let r_inv = spd_inverse(noise.r())?;
        let p_inv = spd_inverse(&iv.prior_weight)?;
        Ok(Self {
            gamma,
            q: noise.q().clone(),
            r: noise.r().clone(),
            q_inv,
            r_inv,
            p_inv,
            xi_set: noise.xi_set().clone(),
            zeta_set: noise.zeta_set().clone(),
            iv,
        })
    }

    pub fn n(&self) -> usize {
        self.iv.n()
    }

    pub fn m(&self) -> usize {
        self.iv.m()
    }

    /// Effective window length `M`.
    pub fn window(&self) -> usize {
        self.iv.window
    }

    /// Weight of the arrival term, `γ^M`.
    pub fn arrival_weight(&self) -> f64 {
        self.gamma.powi(self.window() as i32)
    }

    /// Weight of the `k`-th window stage (`k = 0` is the oldest), `γ^{M−1−k}`.
    pub fn stage_weight(&self, k: usize) -> f64 {
        self.gamma.powi((self.window() - 1 - k) as i32)
    }

    /// Rolls `(x̂_{t−M}, ξ̂)` through the window dynamics.
    pub fn rollout(&self, x0: &DVector<f64>, xi: &[DVector<f64>]) -> Result<PrimalSolution> {
        let (n, window) = (self.n(), self.window());
        if x0.len() != n || xi.len() != window || xi.iter().any(|v| v.len() != n) {
            return Err(Error::DimensionMismatch("decision variables do not match the window".into()));
        }
        let mut x_traj = Vec::with_capacity(window + 1);
        let mut zeta = Vec::with_capacity(window);
        let mut x = x0.clone();
        for k in 0..window {
            zeta.push(&self.iv.window_measurements[k] - &self.iv.window_measurement_maps[k] * &x);
            let next = &self.iv.window_dynamics[k] * &x + &xi[k];
            x_traj.push(x);
            x = next;
        }
        x_traj.push(x);
        let mut sol = PrimalSolution {
            x0_hat: x0.clone(),
            xi_hat: xi.to_vec(),
            x_traj,
            zeta_hat: zeta,
            cost: 0.0,
            feasible: false,
        };
        sol.cost = mhe_cost(self, &sol)?;
        sol.feasible = self.is_feasible(&sol, TOL_FEAS);
        Ok(sol)
    }

    pub fn is_feasible(&self, sol: &PrimalSolution, tol: f64) -> bool {
        sol.xi_hat.iter().all(|v| self.xi_set.contains(v, tol))
            && sol.zeta_hat.iter().all(|v| self.zeta_set.contains(v, tol))
    }

    /// Largest per-coordinate constraint violation.
    pub fn violation(&self, sol: &PrimalSolution) -> f64 {
        let a = sol.xi_hat.iter().map(|v| self.xi_set.violation(v)).fold(0.0, f64::max);
        let b = sol.zeta_hat.iter().map(|v| self.zeta_set.violation(v)).fold(0.0, f64::max);
        a.max(b)
    }

    /// Prior rollout with zero process noise: `x̂*`, `A x̂*`, ...
    fn prior_rollout(&self) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.window());
        let mut x = self.iv.prior_estimate.clone();
        for k in 0..self.window() {
            let next = &self.iv.window_dynamics[k] * &x;
            out.push(x);
            x = next;
        }
        out
    }
}

/// Decision variables of the MHE problem plus everything they imply.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalSolution {
    pub x0_hat: DVector<f64>,
    pub xi_hat: Vec<DVector<f64>>,
    /// `x̂_{t−M|t} .. x̂_{t|t}`.
    pub x_traj: Vec<DVector<f64>>,
    pub zeta_hat: Vec<DVector<f64>>,
    pub cost: f64,
    pub feasible: bool,
}

impl PrimalSolution {
    /// The state estimate for time `t`, `x̂_{t|t}`.
    pub fn estimate(&self) -> &DVector<f64> {
        self.x_traj.last().expect("rollout is never empty")
    }

    /// `(x̂_{t−M}, ξ̂_{t−M}, …, ξ̂_{t−1})` stacked.
    pub fn decision_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.x0_hat.iter().copied().collect();
        for xi in &self.xi_hat {
            v.extend(xi.iter());
        }
        DVector::from_vec(v)
    }
}

/// Evaluates the MHE cost at the solution's stored variables.
pub fn mhe_cost(inst: &MheInstance, sol: &PrimalSolution) -> Result<f64> {
    let (n, m, window) = (inst.n(), inst.m(), inst.window());
    if sol.x0_hat.len() != n
        || sol.xi_hat.len() != window
        || sol.zeta_hat.len() != window
        || sol.xi_hat.iter().any(|v| v.len() != n)
        || sol.zeta_hat.iter().any(|v| v.len() != m)
    {
        return Err(Error::DimensionMismatch("solution does not match the instance".into()));
    }
    let dx = &sol.x0_hat - &inst.iv.prior_estimate;
    let mut cost = inst.arrival_weight() * quad(&dx, &inst.p_inv);
    for k in 0..window {
        let w = inst.stage_weight(k);
        cost += w * (quad(&sol.xi_hat[k], &inst.q_inv) + quad(&sol.zeta_hat[k], &inst.r_inv));
    }
    Ok(cost.max(0.0))
}

/// What a constraint row of the condensed QP refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// Coordinate `coord` of `ξ̂_k`.
    ProcessNoise { stage: usize, coord: usize },
    /// Coordinate `coord` of `ζ̂_k` (row bounds are on `C_k x̂_k`).
    MeasurementNoise { stage: usize, coord: usize },
}

/// The MHE problem condensed onto `d = z − z̄`, where `z = (x̂_{t−M}, ξ̂)` and
/// `z̄ = (x̂*_{t−M}, 0)`, so that `V = ½ dᵀH d + fᵀd + c0`.
#[derive(Clone, Debug)]
pub struct CondensedQp {
    pub qp: QpProblem,
    pub offset: f64,
    pub rows: Vec<RowKind>,
    center: DVector<f64>,
}

impl CondensedQp {
    pub fn build(inst: &MheInstance) -> Result<Self> {
        let (n, m, window) = (inst.n(), inst.m(), inst.window());
        let dim = n * (window + 1);
        let prior_roll = inst.prior_rollout();

        // state_maps[k]: x̂_k − (prior rollout)_k as a linear map of d
        let mut state_maps = Vec::with_capacity(window);
        let mut e = DMatrix::zeros(n, dim);
        e.view_mut((0, 0), (n, n)).fill_with_identity();
        for k in 0..window {
            state_maps.push(e.clone());
            let mut next = &inst.iv.window_dynamics[k] * &e;
            for i in 0..n {
                next[(i, n * (k + 1) + i)] += 1.0;
            }
            e = next;
        }

        let mut h = DMatrix::zeros(dim, dim);
        let mut f = DVector::zeros(dim);
        let aw = inst.arrival_weight();
        h.view_mut((0, 0), (n, n)).copy_from(&(&inst.p_inv * (2.0 * aw)));
        let mut offset = 0.0;
        let mut rows = Vec::new();
        let mut g_rows: Vec<DVector<f64>> = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for k in 0..window {
            let w = inst.stage_weight(k);
            let off = n * (k + 1);
            let mut blk = h.view_mut((off, off), (n, n));
            blk += &inst.q_inv * (2.0 * w);
            let c = &inst.iv.window_measurement_maps[k];
            let ce = c * &state_maps[k];
            let resid = &inst.iv.window_measurements[k] - c * &prior_roll[k];
            let rw = &inst.r_inv * w;
            h += ce.transpose() * &rw * &ce * 2.0;
            f -= ce.transpose() * (&rw * &resid) * 2.0;
            offset += quad(&resid, &rw);

            for i in 0..n {
                let (lo, hi) = (inst.xi_set.lower()[i], inst.xi_set.upper()[i]);
                if lo.is_finite() || hi.is_finite() {
                    let mut row = DVector::zeros(dim);
                    row[off + i] = 1.0;
                    g_rows.push(row);
                    lower.push(lo);
                    upper.push(hi);
                    rows.push(RowKind::ProcessNoise { stage: k, coord: i });
                }
            }
            for i in 0..m {
                let (lo, hi) = (inst.zeta_set.lower()[i], inst.zeta_set.upper()[i]);
                if lo.is_finite() || hi.is_finite() {
                    g_rows.push(ce.row(i).transpose());
                    lower.push(resid[i] - hi);
                    upper.push(resid[i] - lo);
                    rows.push(RowKind::MeasurementNoise { stage: k, coord: i });
                }
            }
        }
        let g = if g_rows.is_empty() {
            DMatrix::zeros(0, dim)
        } else {
            DMatrix::from_fn(g_rows.len(), dim, |i, j| g_rows[i][j])
        };
        let qp = QpProblem::new(
            symmetrize(&h),
            f,
            g,
            DVector::from_vec(lower),
            DVector::from_vec(upper),
        )?;
        let mut center = DVector::zeros(dim);
        center.rows_mut(0, n).copy_from(&inst.iv.prior_estimate);
        Ok(Self { qp, offset, rows, center })
    }

    /// Maps a condensed iterate back to `(x̂_{t−M}, ξ̂)`.
    pub fn unpack(&self, d: &DVector<f64>, n: usize) -> (DVector<f64>, Vec<DVector<f64>>) {
        let z = d + &self.center;
        let x0 = z.rows(0, n).into_owned();
        let window = z.len() / n - 1;
        let xi = (0..window).map(|k| z.rows(n * (k + 1), n).into_owned()).collect();
        (x0, xi)
    }

    pub fn pack(&self, sol: &PrimalSolution) -> DVector<f64> {
        sol.decision_vector() - &self.center
    }

    pub fn cost(&self, d: &DVector<f64>) -> f64 {
        self.qp.objective(d) + self.offset
    }
}

/// Full output of a primal solve.
#[derive(Clone, Debug)]
pub struct PrimalSolve {
    pub solution: PrimalSolution,
    pub qp: CondensedQp,
    pub raw: QpSolution,
    /// Primal minus dual value of the condensed QP at the returned pair.
    pub duality_gap: f64,
}

impl PrimalSolve {
    /// Normal-cone elements of the measurement-noise boxes at the optimum,
    /// expressed in `ζ` coordinates (one vector per stage).
    pub fn zeta_box_multipliers(&self, m: usize) -> Vec<DVector<f64>> {
        let window = self.solution.zeta_hat.len();
        let mut out = vec![DVector::zeros(m); window];
        for (j, row) in self.qp.rows.iter().enumerate() {
            if let RowKind::MeasurementNoise { stage, coord } = *row {
                out[stage][coord] = -self.raw.y[j];
            }
        }
        out
    }
}

fn primal_settings() -> QpSettings {
    QpSettings::default()
}

/// Solves the constrained MHE problem.
pub fn solve_primal(inst: &MheInstance) -> Result<PrimalSolution> {
    solve_primal_detailed(inst, &primal_settings()).map(|s| s.solution)
}

pub fn solve_primal_detailed(inst: &MheInstance, settings: &QpSettings) -> Result<PrimalSolve> {
    let cq = CondensedQp::build(inst)?;
    let raw = match solve_qp(&cq.qp, settings) {
        Ok(r) => r,
        Err(e @ Error::MaxIterations { .. }) => {
            return match phase1_feasible(inst)? {
                (false, _) => Err(Error::Infeasible(f64::NAN)),
                (true, _) => Err(e),
            };
        }
        Err(e) => return Err(e),
    };
    if raw.status == QpStatus::PrimalInfeasible {
        return Err(Error::Infeasible(raw.primal_residual));
    }
    let raw = if raw.polished {
        raw
    } else {
        let tight = QpSettings { eps_abs: 1e-11, eps_rel: 1e-11, max_iter: 200_000, ..settings.clone() };
        solve_qp_warm(&cq.qp, &tight, Some(&raw.z))?
    };
    let (x0, xi) = cq.unpack(&raw.z, inst.n());
    let solution = inst.rollout(&x0, &xi)?;
    let duality_gap = cq.qp.duality_gap(&raw.z, &raw.y).unwrap_or(f64::NAN);
    Ok(PrimalSolve { solution, qp: cq, raw, duality_gap })
}

/// Feasibility test for the MHE constraints. On success returns the
/// minimum-norm feasible decision `(x̂_{t−M}, ξ̂)` relative to `(x̂*, 0)`.
pub fn phase1_feasible(inst: &MheInstance) -> Result<(bool, Option<PrimalSolution>)> {
    let cq = CondensedQp::build(inst)?;
    let dim = cq.qp.num_vars();
    let p = QpProblem::new(
        DMatrix::identity(dim, dim),
        DVector::zeros(dim),
        cq.qp.g.clone(),
        cq.qp.lower.clone(),
        cq.qp.upper.clone(),
    )?;
    let settings = QpSettings { eps_abs: 1e-10, eps_rel: 1e-10, max_iter: 50_000, ..QpSettings::default() };
    let sol = match solve_qp(&p, &settings) {
        Ok(s) => s,
        Err(Error::MaxIterations { .. }) => return Ok((false, None)),
        Err(e) => return Err(e),
    };
    if sol.status == QpStatus::PrimalInfeasible {
        return Ok((false, None));
    }
    let (x0, xi) = cq.unpack(&sol.z, inst.n());
    let witness = inst.rollout(&x0, &xi)?;
    if inst.violation(&witness) <= TOL_FEAS {
        Ok((true, Some(witness)))
    } else {
        Ok((false, None))
    }
}

/// Arrival-cost weight `P` valid at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalCost {
    pub p: DMatrix<f64>,
    pub t: usize,
}

/// One step of the prediction-form Riccati recursion
/// `P⁺ = Q + A P Aᵀ − A P Cᵀ (R + C P Cᵀ)⁻¹ C P Aᵀ`.
pub fn riccati_update(
    arrival: &ArrivalCost,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<ArrivalCost> {
    let p = &arrival.p;
    let s = symmetrize(&(r + c * p * c.transpose()));
    let cond = sym_condition(&s);
    if !cond.is_finite() || cond > MAX_INNOVATION_CONDITION {
        return Err(Error::SingularInnovation(cond));
    }
    let s_inv = spd_inverse(&s).map_err(|_| Error::SingularInnovation(cond))?;
    let apc = a * p * c.transpose();
    let next = q + a * p * a.transpose() - &apc * s_inv * apc.transpose();
    Ok(ArrivalCost { p: symmetrize(&next), t: arrival.t + 1 })
}

/// Iterates the Riccati recursion of an LTI system until successive iterates
/// differ by less than `tol` in Frobenius norm.
pub fn stationary_arrival(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let mut cur = ArrivalCost { p: p0.clone(), t: 0 };
    for _ in 0..max_iter {
        let next = riccati_update(&cur, a, c, q, r)?;
        if (&next.p - &cur.p).norm() <= tol {
            return Ok(next.p);
        }
        cur = next;
    }
    Err(Error::MaxIterations { iterations: max_iter, primal: f64::NAN, dual: f64::NAN, best: vec![] })
}

/// Prediction-form Kalman filter step: `x̂⁺ = A x̂ + A P Cᵀ S⁻¹ (y − C x̂)`.
pub fn kalman_step(
    x: &DVector<f64>,
    arrival: &ArrivalCost,
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DVector<f64>, ArrivalCost)> {
    let p = &arrival.p;
    let s = symmetrize(&(r + c * p * c.transpose()));
    let cond = sym_condition(&s);
    if !cond.is_finite() || cond > MAX_INNOVATION_CONDITION {
        return Err(Error::SingularInnovation(cond));
    }
    let s_inv = spd_inverse(&s).map_err(|_| Error::SingularInnovation(cond))?;
    let gain = a * p * c.transpose() * s_inv;
    let x_next = a * x + gain * (y - c * x);
    Ok((x_next, riccati_update(arrival, a, c, q, r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_info_vector, example_system, simulate_trajectory, NoiseSpec};

    fn scalar_instance(gamma: f64, y: f64, prior: f64, boxes: (BoxSet, BoxSet)) -> MheInstance {
        let one = DMatrix::from_element(1, 1, 1.0);
        let model = crate::model::SystemModel::lti(one.clone(), one.clone()).unwrap();
        let noise = NoiseSpec::new(one.clone(), one.clone(), boxes.0, boxes.1).unwrap();
        let iv = build_info_vector(&[DVector::from_element(1, y)], &model, &DVector::from_element(1, prior), &one, 1, 1)
            .unwrap();
        MheInstance::new(iv, &noise, gamma).unwrap()
    }

    #[test]
    fn hand_summed_cost() {
        let inst = scalar_instance(1.0, 0.0, 0.0, (BoxSet::unbounded(1), BoxSet::unbounded(1)));
        let sol = PrimalSolution {
            x0_hat: DVector::from_element(1, 1.0),
            xi_hat: vec![DVector::from_element(1, 2.0)],
            x_traj: vec![DVector::from_element(1, 1.0), DVector::from_element(1, 3.0)],
            zeta_hat: vec![DVector::from_element(1, 3.0)],
            cost: 0.0,
            feasible: true,
        };
        assert_eq!(mhe_cost(&inst, &sol).unwrap(), 14.0);
        let bad = PrimalSolution { zeta_hat: vec![], ..sol };
        assert!(matches!(mhe_cost(&inst, &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn perfect_fit_costs_nothing() {
        let (model, noise) = example_system();
        let x0 = DVector::from_vec(vec![1.0, 0.2]);
        let ys: Vec<_> = (0..10)
            .map(|k| model.c(0) * model.a(0).pow(k as u32) * &x0)
            .collect();
        let iv = build_info_vector(&ys, &model, &x0, &DMatrix::identity(2, 2), 10, 10).unwrap();
        let inst = MheInstance::new(iv, &noise, 0.8).unwrap();
        let sol = inst.rollout(&x0, &vec![DVector::zeros(2); 10]).unwrap();
        assert!(sol.cost.abs() < 1e-20);
        let solved = solve_primal(&inst).unwrap();
        assert!(solved.cost < 1e-12);
    }

    #[test]
    fn riccati_scalar_and_blind() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let next = riccati_update(&ArrivalCost { p: one.clone(), t: 0 }, &one, &one, &one, &one).unwrap();
        assert!((next.p[(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(next.t, 1);

        let (model, noise) = example_system();
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let c0 = DMatrix::zeros(1, 2);
        let next = riccati_update(&ArrivalCost { p: p.clone(), t: 0 }, model.a(0), &c0, noise.q(), noise.r()).unwrap();
        let expect = noise.q() + model.a(0) * &p * model.a(0).transpose();
        assert!((next.p - expect).amax() < 1e-15);
    }

    #[test]
    fn riccati_singular_innovation() {
        let z = DMatrix::zeros(1, 1);
        let one = DMatrix::from_element(1, 1, 1.0);
        let r = riccati_update(&ArrivalCost { p: z.clone(), t: 0 }, &one, &one, &one, &z);
        assert!(matches!(r, Err(Error::SingularInnovation(_))));
    }

    #[test]
    fn riccati_converges_on_example() {
        let (model, noise) = example_system();
        let mut cur = ArrivalCost { p: DMatrix::identity(2, 2), t: 0 };
        let mut last_step = f64::INFINITY;
        for _ in 0..200 {
            let next = riccati_update(&cur, model.a(0), model.c(0), noise.q(), noise.r()).unwrap();
            assert!(crate::linalg::is_symmetric(&next.p, 1e-14));
            assert!(crate::linalg::min_eigenvalue(&next.p) > 0.0);
            last_step = (&next.p - &cur.p).norm();
            cur = next;
        }
        assert!(last_step <= 1e-9);
    }

    #[test]
    fn scalar_kalman_step() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (x, _) = kalman_step(
            &DVector::zeros(1),
            &ArrivalCost { p: one.clone(), t: 0 },
            &DVector::from_element(1, 2.0),
            &one,
            &one,
            &one,
            &one,
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_kalman_step() {
        let (model, noise) = example_system();
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let y = model.c(0) * &x;
        let (next, _) = kalman_step(
            &x,
            &ArrivalCost { p: DMatrix::identity(2, 2), t: 0 },
            &y,
            model.a(0),
            model.c(0),
            noise.q(),
            noise.r(),
        )
        .unwrap();
        assert!((next - model.a(0) * &x).amax() < 1e-15);
    }

    #[test]
    fn phase1_cases() {
        let (model, noise) = example_system();
        let traj = simulate_trajectory(&model, &noise, &DVector::zeros(2), 30, 9).unwrap();
        let iv = build_info_vector(&traj.measurements, &model, &traj.states[20], &DMatrix::identity(2, 2), 30, 10)
            .unwrap();
        let inst = MheInstance::new(iv.clone(), &noise, 0.8).unwrap();
        let (ok, witness) = phase1_feasible(&inst).unwrap();
        assert!(ok);
        assert!(inst.violation(&witness.unwrap()) <= TOL_FEAS);

        let free = NoiseSpec::new(noise.q().clone(), noise.r().clone(), BoxSet::unbounded(2), BoxSet::unbounded(1))
            .unwrap();
        let inst = MheInstance::new(iv.clone(), &free, 0.8).unwrap();
        assert!(phase1_feasible(&inst).unwrap().0);

        let pinned = NoiseSpec::new(noise.q().clone(), noise.r().clone(), BoxSet::origin(2), BoxSet::origin(1)).unwrap();
        let mut iv_bad = iv;
        iv_bad.window_measurements[3][0] += 5.0;
        let inst = MheInstance::new(iv_bad, &pinned, 0.8).unwrap();
        assert!(!phase1_feasible(&inst).unwrap().0);
        assert!(matches!(solve_primal(&inst), Err(Error::Infeasible(_))));
    }
}

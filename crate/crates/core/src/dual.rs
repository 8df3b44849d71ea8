//! Explicit Lagrange dual of the MHE problem.
//!
//! Dualizing the window dynamics (multipliers `λ_i`) and the measurement
//! equations (multipliers `μ_i`) and minimizing the Lagrangian in closed form
//! gives a concave function of `μ` alone: stationarity in the intermediate
//! states forces the backward recursion
//!
//! ```text
//! λ_{t−1} = 0,    λ_{i−1} = A_iᵀ λ_i + C_iᵀ μ_i
//! ```
//!
//! the window's initial state has the minimizer
//! `x̂ = x̂* + P (A_{t−M}ᵀ λ_{t−M} + C_{t−M}ᵀ μ_{t−M}) / (2 γ^M)` and each noise
//! term is minimized over its box through a scaled projection
//! `Π(z) = argmin_{x ∈ box} ‖x − z/2‖²`.
//!
//! The scaled boxes `{Q^{−1/2} x : x ∈ Ξ}` are boxes only when `Q` and `R` are
//! diagonal, so other covariances are rejected.

use nalgebra::{DMatrix, DVector};

use crate::linalg::is_diagonal;
use crate::mhe::{MheInstance, PrimalSolution, PrimalSolve};
use crate::model::{BoxSet, ConvexSet};
use crate::{Error, Result};

/// `argmin_{x ∈ box} ‖x − z/2‖²`, i.e. `clamp(z/2)`.
pub fn project_half(z: &DVector<f64>, bounds: &BoxSet) -> DVector<f64> {
    bounds.project(&(z * 0.5))
}

/// The noise boxes mapped through `Q^{−1/2}` and `R^{−1/2}`.
#[derive(Clone, Debug)]
pub struct ScaledSets {
    pub xi_tilde: BoxSet,
    pub zeta_tilde: BoxSet,
    /// Diagonal of `Q^{1/2}`.
    pub q_sqrt: DVector<f64>,
    /// Diagonal of `R^{1/2}`.
    pub r_sqrt: DVector<f64>,
}

impl ScaledSets {
    pub fn new(q: &DMatrix<f64>, r: &DMatrix<f64>, xi: &BoxSet, zeta: &BoxSet) -> Result<Self> {
        if !is_diagonal(q) || !is_diagonal(r) {
            return Err(Error::Domain(
                "scaled noise sets need diagonal Q and R (a rotated box has no closed-form projection)".into(),
            ));
        }
        let q_sqrt = q.diagonal().map(f64::sqrt);
        let r_sqrt = r.diagonal().map(f64::sqrt);
        Ok(Self {
            xi_tilde: xi.scaled(&q_sqrt.map(|v| 1.0 / v)),
            zeta_tilde: zeta.scaled(&r_sqrt.map(|v| 1.0 / v)),
            q_sqrt,
            r_sqrt,
        })
    }

    pub fn for_instance(inst: &MheInstance) -> Result<Self> {
        Self::new(&inst.q, &inst.r, &inst.xi_set, &inst.zeta_set)
    }
}

/// Dual iterate: free multipliers `μ` and the derived `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub mu: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

impl DualSolution {
    pub fn flat_mu(&self) -> DVector<f64> {
        flatten(&self.mu)
    }
}

pub fn flatten(blocks: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(blocks.iter().map(|b| b.len()).sum(), blocks.iter().flat_map(|b| b.iter().copied()))
}

pub fn unflatten(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    (0..v.len() / block).map(|k| v.rows(k * block, block).into_owned()).collect()
}

/// Backward recursion for `λ` given `μ` over the window.
pub fn adjoint_lambda(
    mu: &[DVector<f64>],
    dynamics: &[DMatrix<f64>],
    measurement_maps: &[DMatrix<f64>],
) -> Result<Vec<DVector<f64>>> {
    let window = dynamics.len();
    if mu.len() != window || measurement_maps.len() != window || window == 0 {
        return Err(Error::DimensionMismatch("multiplier sequence does not match the window".into()));
    }
    let n = dynamics[0].nrows();
    for k in 0..window {
        if mu[k].len() != measurement_maps[k].nrows() {
            return Err(Error::DimensionMismatch(format!("μ_{k} has the wrong length")));
        }
    }
    let mut lambda = vec![DVector::zeros(n); window];
    for k in (1..window).rev() {
        lambda[k - 1] = dynamics[k].transpose() * &lambda[k] + measurement_maps[k].transpose() * &mu[k];
    }
    Ok(lambda)
}

/// Closed-form minimizers of the Lagrangian at a given `μ`.
#[derive(Clone, Debug)]
struct LagrangianMin {
    x0: DVector<f64>,
    xi: Vec<DVector<f64>>,
    zeta: Vec<DVector<f64>>,
    value: f64,
}

/// Dual-side view of an MHE instance.
#[derive(Clone, Debug)]
pub struct DualProblem<'a> {
    inst: &'a MheInstance,
    sets: ScaledSets,
    /// `λ_i = L_i μ` as matrices acting on the stacked `μ`.
    lambda_maps: Vec<DMatrix<f64>>,
    /// `v = A_{t−M}ᵀ λ_{t−M} + C_{t−M}ᵀ μ_{t−M} = V μ`.
    v_map: DMatrix<f64>,
}

impl<'a> DualProblem<'a> {
    pub fn new(inst: &'a MheInstance) -> Result<Self> {
        if inst.gamma <= 0.0 {
            return Err(Error::Domain("the dual needs a positive discount factor".into()));
        }
        let (window, m, n) = (inst.window(), inst.m(), inst.n());
        let iv = &inst.iv;
        let dim = window * m;
        let mut lambda_maps = vec![DMatrix::zeros(n, dim); window];
        let mut v_map = DMatrix::zeros(n, dim);
        for j in 0..dim {
            let mut unit = DVector::zeros(dim);
            unit[j] = 1.0;
            let mu = unflatten(&unit, m);
            let lambda = adjoint_lambda(&mu, &iv.window_dynamics, &iv.window_measurement_maps)?;
            for (map, l) in lambda_maps.iter_mut().zip(&lambda) {
                map.set_column(j, l);
            }
            let v = iv.window_dynamics[0].transpose() * &lambda[0] + iv.window_measurement_maps[0].transpose() * &mu[0];
            v_map.set_column(j, &v);
        }
        Ok(Self { inst, sets: ScaledSets::for_instance(inst)?, lambda_maps, v_map })
    }

    pub fn instance(&self) -> &MheInstance {
        self.inst
    }

    pub fn dim(&self) -> usize {
        self.inst.window() * self.inst.m()
    }

    fn minimize_lagrangian(&self, mu: &[DVector<f64>]) -> Result<LagrangianMin> {
        let inst = self.inst;
        let iv = &inst.iv;
        let window = inst.window();
        let lambda = adjoint_lambda(mu, &iv.window_dynamics, &iv.window_measurement_maps)?;
        let aw = inst.arrival_weight();
        let v = iv.window_dynamics[0].transpose() * &lambda[0] + iv.window_measurement_maps[0].transpose() * &mu[0];
        let pv = &iv.prior_weight * &v;
        let x0 = &iv.prior_estimate + &pv * (0.5 / aw);
        let mut value = -v.dot(&pv) / (4.0 * aw) - v.dot(&iv.prior_estimate);
        let mut xi = Vec::with_capacity(window);
        let mut zeta = Vec::with_capacity(window);
        for k in 0..window {
            let w = inst.stage_weight(k);
            // ξ̃* = Π(γ^{i+1−t} Q^{1/2} λ_i) with γ^{i+1−t} = 1 / w
            let a = self.sets.q_sqrt.component_mul(&lambda[k]) / w;
            let xt = project_half(&a, &self.sets.xi_tilde);
            let xi_k = self.sets.q_sqrt.component_mul(&xt);
            value += w * xt.norm_squared() - lambda[k].dot(&xi_k);
            xi.push(xi_k);

            let b = self.sets.r_sqrt.component_mul(&mu[k]) / w;
            let zt = project_half(&b, &self.sets.zeta_tilde);
            let zeta_k = self.sets.r_sqrt.component_mul(&zt);
            value += w * zt.norm_squared() - mu[k].dot(&zeta_k) + mu[k].dot(&iv.window_measurements[k]);
            zeta.push(zeta_k);
        }
        Ok(LagrangianMin { x0, xi, zeta, value })
    }

    /// `G(μ)`, the Lagrange dual function.
    pub fn value(&self, mu: &[DVector<f64>]) -> Result<f64> {
        Ok(self.minimize_lagrangian(mu)?.value)
    }

    /// `∇G(μ)`: the measurement-equation residual `y_i − C_i x̂_i − ζ̂_i`
    /// of the Lagrangian minimizer, with `x̂` rolled out from `(x̂_0, ξ̂)`.
    pub fn gradient(&self, mu: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        Ok(self.value_and_gradient(mu)?.1)
    }

    pub fn value_and_gradient(&self, mu: &[DVector<f64>]) -> Result<(f64, Vec<DVector<f64>>)> {
        let lm = self.minimize_lagrangian(mu)?;
        let iv = &self.inst.iv;
        let mut grad = Vec::with_capacity(mu.len());
        let mut x = lm.x0.clone();
        for k in 0..mu.len() {
            grad.push(&iv.window_measurements[k] - &iv.window_measurement_maps[k] * &x - &lm.zeta[k]);
            x = &iv.window_dynamics[k] * &x + &lm.xi[k];
        }
        Ok((lm.value, grad))
    }

    /// A generalized Hessian of `G` at `μ`: the Hessian of the quadratic piece
    /// selected by which half-projections are strictly inside their boxes.
    pub fn hessian(&self, mu: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let inst = self.inst;
        let m = inst.m();
        let lambda = adjoint_lambda(mu, &inst.iv.window_dynamics, &inst.iv.window_measurement_maps)?;
        let aw = inst.arrival_weight();
        let mut h = -(self.v_map.transpose() * &inst.iv.prior_weight * &self.v_map) / (2.0 * aw);
        for k in 0..inst.window() {
            let w = inst.stage_weight(k);
            let a = self.sets.q_sqrt.component_mul(&lambda[k]) / w;
            let curv = free_curvature(&a, &self.sets.q_sqrt, &self.sets.xi_tilde) / (2.0 * w);
            let lk = &self.lambda_maps[k];
            h -= lk.transpose() * DMatrix::from_diagonal(&curv) * lk;

            let b = self.sets.r_sqrt.component_mul(&mu[k]) / w;
            let curv = free_curvature(&b, &self.sets.r_sqrt, &self.sets.zeta_tilde) / (2.0 * w);
            for i in 0..m {
                h[(k * m + i, k * m + i)] -= curv[i];
            }
        }
        Ok(h)
    }

    /// Primal point `(x̂_{t−M}, ξ̂)` minimizing the Lagrangian at `μ`, rolled out.
    pub fn recover_primal(&self, mu: &[DVector<f64>]) -> Result<PrimalSolution> {
        let lm = self.minimize_lagrangian(mu)?;
        self.inst.rollout(&lm.x0, &lm.xi)
    }

    /// Multipliers recovered from an exact primal solve: stationarity in `ζ̂`
    /// gives `μ_i = 2 γ^{t−i−1} R⁻¹ ζ̂_i + ν_i` with `ν_i` the box normal.
    pub fn multipliers_from_primal(&self, solve: &PrimalSolve) -> Vec<DVector<f64>> {
        let inst = self.inst;
        let normals = solve.zeta_box_multipliers(inst.m());
        (0..inst.window())
            .map(|k| &inst.r_inv * &solve.solution.zeta_hat[k] * (2.0 * inst.stage_weight(k)) + &normals[k])
            .collect()
    }
}

/// `scale_i²` where `z_i/2` lies strictly inside the box, zero elsewhere.
fn free_curvature(z: &DVector<f64>, scale: &DVector<f64>, bounds: &BoxSet) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| {
        let half = 0.5 * z[i];
        if bounds.lower()[i] < half && half < bounds.upper()[i] {
            scale[i] * scale[i]
        } else {
            0.0
        }
    })
}

/// `G(μ)` for an instance.
pub fn dual_function(mu: &[DVector<f64>], inst: &MheInstance) -> Result<f64> {
    DualProblem::new(inst)?.value(mu)
}

pub fn dual_gradient(mu: &[DVector<f64>], inst: &MheInstance) -> Result<Vec<DVector<f64>>> {
    DualProblem::new(inst)?.gradient(mu)
}

pub fn recover_primal(dual: &DualSolution, inst: &MheInstance) -> Result<PrimalSolution> {
    DualProblem::new(inst)?.recover_primal(&dual.mu)
}

/// How `solve_dual_from` picks its ascent direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AscentMethod {
    /// Steepest ascent along `∇G`.
    Gradient,
    /// Generalized Newton direction of the piecewise-quadratic `G`.
    Newton,
}

/// Dual ascent settings.
#[derive(Clone, Debug)]
pub struct AscentSettings {
    pub initial_step: f64,
    pub shrink: f64,
    /// Armijo constant: accept once `G(μ + s d) >= G(μ) + slope·s·∇Gᵀd`.
    pub slope: f64,
    /// Stop when `‖∇G‖ <= tol · (1 + |G|)`.
    pub tol: f64,
    pub max_iter: usize,
    pub method: AscentMethod,
    /// Emit `iteration,G,‖∇G‖` rows to stderr.
    pub debug: bool,
}

impl Default for AscentSettings {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            slope: 1e-4,
            tol: 1e-7,
            max_iter: 200_000,
            method: AscentMethod::Newton,
            debug: false,
        }
    }
}

/// Maximizes `G` from `μ = 0`.
pub fn solve_dual(inst: &MheInstance) -> Result<DualSolution> {
    let zero = vec![DVector::zeros(inst.m()); inst.window()];
    solve_dual_from(inst, &zero, &AscentSettings::default())
}

fn exhausted(iterations: usize, gnorm: f64, mu: &DVector<f64>) -> Error {
    Error::MaxIterations { iterations, primal: f64::NAN, dual: gnorm, best: mu.as_slice().to_vec() }
}

/// Ascent with a backtracking line search from a given starting point.
///
/// Each iteration picks a direction `d` (the gradient, or the Newton
/// direction `(δI − H)⁻¹∇G` for a generalized Hessian `H` and a small
/// regularization `δ`) and accepts the first `s` in
/// `s_0, s_0·shrink, s_0·shrink², …` that passes the Armijo test. Gradient
/// steps start from twice the previously accepted step (the first from
/// `initial_step`), Newton steps from `s = 1`. A Newton direction that is not
/// an ascent direction falls back to the gradient.
pub fn solve_dual_from(inst: &MheInstance, mu0: &[DVector<f64>], settings: &AscentSettings) -> Result<DualSolution> {
    let problem = DualProblem::new(inst)?;
    let m = inst.m();
    let mut mu = flatten(mu0);
    if mu.len() != problem.dim() {
        return Err(Error::DimensionMismatch("starting multipliers do not match the window".into()));
    }
    let eval = |v: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (g, grad) = problem.value_and_gradient(&unflatten(v, m))?;
        Ok((g, flatten(&grad)))
    };
    let (mut value, mut grad) = eval(&mu)?;
    let mut step = settings.initial_step;
    for iter in 0..settings.max_iter {
        let gnorm = grad.norm();
        if settings.debug {
            eprintln!("{iter},{value:e},{gnorm:e}");
        }
        if gnorm <= settings.tol * (1.0 + value.abs()) {
            let mu = unflatten(&mu, m);
            let lambda = adjoint_lambda(&mu, &inst.iv.window_dynamics, &inst.iv.window_measurement_maps)?;
            return Ok(DualSolution { mu, lambda, value, gradient_norm: gnorm, iterations: iter });
        }
        let newton = match settings.method {
            AscentMethod::Newton => newton_direction(&problem, &mu, &grad)?,
            AscentMethod::Gradient => None,
        };
        let (dir, mut s) = match newton {
            Some(d) => (d, 1.0),
            None => (grad.clone(), if iter == 0 { settings.initial_step } else { 2.0 * step }),
        };
        let rate = grad.dot(&dir);
        loop {
            let cand = &mu + &dir * s;
            let (cv, cg) = eval(&cand)?;
            if cv >= value + settings.slope * s * rate {
                mu = cand;
                value = cv;
                grad = cg;
                break;
            }
            s *= settings.shrink;
            if s < 1e-20 {
                return Err(exhausted(iter, gnorm, &mu));
            }
        }
        step = s;
    }
    Err(exhausted(settings.max_iter, grad.norm(), &mu))
}

/// `(δI − H)⁻¹∇G`, or `None` when it is not a usable ascent direction.
fn newton_direction(problem: &DualProblem<'_>, mu: &DVector<f64>, grad: &DVector<f64>) -> Result<Option<DVector<f64>>> {
    let mut k = -problem.hessian(&unflatten(mu, problem.inst.m()))?;
    let scale = k.diagonal().max().max(1.0);
    for i in 0..k.nrows() {
        k[(i, i)] += 1e-10 * scale;
    }
    let Some(chol) = k.cholesky() else { return Ok(None) };
    let d = chol.solve(grad);
    Ok((d.iter().all(|v| v.is_finite()) && grad.dot(&d) > 0.0).then_some(d))
}

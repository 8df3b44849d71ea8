//! Dense convex QP solver for
//!
//! ```text
//! minimize ½ zᵀH z + fᵀz   subject to   l <= G z <= u
//! ```
//!
//! ADMM in the OSQP splitting (box projections on `Gz`), followed by an
//! active-set polish that solves the equality-constrained KKT system for the
//! active set guessed by ADMM and refines it until primal and dual signs agree.
//! Problems here are small (a few dozen variables), so everything is dense.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let n = f.len();
        if h.shape() != (n, n) || g.ncols() != n || lower.len() != g.nrows() || upper.len() != g.nrows() {
            return Err(Error::DimensionMismatch("QP data sizes are inconsistent".into()));
        }
        if (0..lower.len()).any(|j| lower[j] > upper[j]) {
            return Err(Error::Domain("QP bound with lower > upper".into()));
        }
        Ok(Self { h, f, g, lower, upper })
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.g.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Largest bound violation of `Gz`.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let gz = &self.g * z;
        (0..gz.len())
            .map(|j| (self.lower[j] - gz[j]).max(gz[j] - self.upper[j]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// `uᵀ max(y, 0) + lᵀ min(y, 0)`, the support function of the bounds.
    fn support(&self, y: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..y.len() {
            if y[j] > 0.0 {
                s += y[j] * self.upper[j];
            } else if y[j] < 0.0 {
                s += y[j] * self.lower[j];
            }
        }
        s
    }

    /// Primal objective minus the Lagrangian dual value at `y`.
    ///
    /// Evaluates the dual exactly: `-½ wᵀH⁻¹w - support(y)` with `w = f + Gᵀy`.
    /// Requires `H ≻ 0`; returns `None` otherwise or when the support is infinite.
    pub fn duality_gap(&self, z: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        let chol = self.h.clone().cholesky()?;
        let w = &self.f + self.g.transpose() * y;
        let dual = -0.5 * w.dot(&chol.solve(&w)) - self.support(y);
        let gap = self.objective(z) - dual;
        gap.is_finite().then_some(gap)
    }
}

#[derive(Clone, Debug)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub polish: bool,
    pub polish_max_iter: usize,
    /// Emit `iteration,primal_residual,objective` rows to stderr.
    pub debug: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 20_000,
            polish: true,
            polish_max_iter: 30,
            debug: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub status: QpStatus,
    pub z: DVector<f64>,
    /// Constraint multipliers: negative on active lower bounds, positive on
    /// active upper bounds.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const ADAPT_INTERVAL: usize = 25;
/// Bounds beyond this magnitude are treated as infinite.
const BOUND_INF: f64 = 1e20;
/// Tolerance on bound violation and multiplier sign accepted by the polish.
const POLISH_TOL: f64 = 1e-9;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Row {
    Free,
    Inequality,
    Equality,
}

struct Admm<'a> {
    p: &'a QpProblem,
    s: &'a QpSettings,
    kinds: Vec<Row>,
    rho: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Admm<'a> {
    fn new(p: &'a QpProblem, s: &'a QpSettings) -> Result<Self> {
        let kinds: Vec<Row> = (0..p.num_constraints())
            .map(|j| {
                let (l, u) = (p.lower[j], p.upper[j]);
                if l <= -BOUND_INF && u >= BOUND_INF {
                    Row::Free
                } else if (u - l).abs() < 1e-12 {
                    Row::Equality
                } else {
                    Row::Inequality
                }
            })
            .collect();
        let rho = Self::rho_vector(&kinds, s.rho);
        let chol = Self::factor(p, s, &rho)?;
        Ok(Self { p, s, kinds, rho, chol })
    }

    fn rho_vector(kinds: &[Row], rho: f64) -> DVector<f64> {
        DVector::from_iterator(
            kinds.len(),
            kinds.iter().map(|k| match k {
                Row::Free => RHO_MIN,
                Row::Inequality => rho,
                Row::Equality => (RHO_EQ_SCALE * rho).min(RHO_MAX),
            }),
        )
    }

    fn factor(
        p: &QpProblem,
        s: &QpSettings,
        rho: &DVector<f64>,
    ) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let n = p.num_vars();
        let mut k = p.h.clone() + DMatrix::identity(n, n) * s.sigma;
        let gr = DMatrix::from_fn(p.g.nrows(), n, |i, j| p.g[(i, j)] * rho[i]);
        k += p.g.transpose() * gr;
        k.cholesky()
            .ok_or_else(|| Error::NotSpd("ADMM system matrix is not positive definite".into()))
    }

    fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |j, _| v[j].clamp(self.p.lower[j], self.p.upper[j]))
    }

    fn solve(&mut self, warm: Option<&DVector<f64>>) -> Result<QpSolution> {
        let p = self.p;
        let s = self.s;
        let n = p.num_vars();
        let mut x = warm.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut z = self.clamp(&(&p.g * &x));
        let mut y = DVector::zeros(p.num_constraints());
        let mut scalar_rho = s.rho;
        let gt = p.g.transpose();

        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut last_res = (f64::INFINITY, f64::INFINITY);
        for iter in 1..=s.max_iter {
            let y_prev = y.clone();
            let rhs = &x * s.sigma - &p.f + &gt * (self.rho.component_mul(&z) - &y);
            let x_tilde = self.chol.solve(&rhs);
            let z_tilde = &p.g * &x_tilde;
            x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_hat = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_new = self.clamp(&(&z_hat + y.component_div(&self.rho)));
            y += self.rho.component_mul(&(&z_hat - &z_new));
            z = z_new;

            let gx = &p.g * &x;
            let hx = &p.h * &x;
            let gty = &gt * &y;
            let r_prim = inf_norm(&(&gx - &z));
            let r_dual = inf_norm(&(&hx + &p.f + &gty));
            last_res = (r_prim, r_dual);
            let eps_prim = s.eps_abs + s.eps_rel * inf_norm(&gx).max(inf_norm(&z));
            let eps_dual =
                s.eps_abs + s.eps_rel * inf_norm(&hx).max(inf_norm(&gty)).max(inf_norm(&p.f));
            if s.debug {
                eprintln!("{iter},{r_prim:e},{:e}", p.objective(&x));
            }
            let score = r_prim / eps_prim + r_dual / eps_dual;
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, x.clone()));
            }
            if r_prim <= eps_prim && r_dual <= eps_dual {
                return Ok(QpSolution {
                    status: QpStatus::Solved,
                    z: x,
                    y,
                    iterations: iter,
                    primal_residual: r_prim,
                    dual_residual: r_dual,
                    polished: false,
                });
            }
            if iter % ADAPT_INTERVAL == 0 {
                if self.certifies_infeasibility(&(&y - &y_prev)) {
                    return Ok(QpSolution {
                        status: QpStatus::PrimalInfeasible,
                        z: x,
                        y: &y - &y_prev,
                        iterations: iter,
                        primal_residual: r_prim,
                        dual_residual: r_dual,
                        polished: false,
                    });
                }
                let num = r_prim / inf_norm(&gx).max(inf_norm(&z)).max(1e-30);
                let den = r_dual / inf_norm(&hx).max(inf_norm(&gty)).max(inf_norm(&p.f)).max(1e-30);
                let ratio = (num / den.max(1e-30)).sqrt();
                let new_rho = (scalar_rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * scalar_rho || new_rho < 0.2 * scalar_rho {
                    scalar_rho = new_rho;
                    self.rho = Self::rho_vector(&self.kinds, scalar_rho);
                    self.chol = Self::factor(p, s, &self.rho)?;
                }
            }
        }
        Err(Error::MaxIterations {
            iterations: s.max_iter,
            primal: last_res.0,
            dual: last_res.1,
            best: best.map(|(_, b)| b.as_slice().to_vec()).unwrap_or_default(),
        })
    }

    fn certifies_infeasibility(&self, dy: &DVector<f64>) -> bool {
        let norm = inf_norm(dy);
        if norm < 1e-30 {
            return false;
        }
        let eps = self.s.eps_infeasible;
        if inf_norm(&(self.p.g.transpose() * dy)) > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for j in 0..dy.len() {
            let d = dy[j];
            if d > eps * norm {
                if self.p.upper[j] >= BOUND_INF {
                    return false;
                }
                support += self.p.upper[j] * d;
            } else if d < -eps * norm {
                if self.p.lower[j] <= -BOUND_INF {
                    return false;
                }
                support += self.p.lower[j] * d;
            }
        }
        support < -eps * norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Active {
    No,
    Lower,
    Upper,
}

/// Solves the equality-constrained QP for a fixed active set and iterates the
/// primal-dual active-set update until the KKT sign conditions hold.
fn polish(p: &QpProblem, admm: &QpSolution) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.num_constraints();
    let n = p.num_vars();
    let gz = &p.g * &admm.z;
    let mut set: Vec<Active> = (0..m)
        .map(|j| {
            if (p.upper[j] - p.lower[j]).abs() < 1e-12 {
                Active::Lower
            } else if admm.y[j] < 0.0 && gz[j] - p.lower[j] < -admm.y[j] {
                Active::Lower
            } else if admm.y[j] > 0.0 && p.upper[j] - gz[j] < admm.y[j] {
                Active::Upper
            } else {
                Active::No
            }
        })
        .collect();

    let mut seen: Vec<Vec<Active>> = Vec::new();
    for _ in 0..30 {
        if seen.contains(&set) {
            return None;
        }
        seen.push(set.clone());
        let idx: Vec<usize> = (0..m).filter(|&j| set[j] != Active::No).collect();
        let k = idx.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.f));
        for (r, &j) in idx.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = p.g[(j, c)];
                kkt[(c, n + r)] = p.g[(j, c)];
            }
            rhs[n + r] = if set[j] == Active::Upper { p.upper[j] } else { p.lower[j] };
        }
        let sol = solve_kkt(&kkt, &rhs, n)?;
        let z = sol.rows(0, n).into_owned();
        let mut y = DVector::zeros(m);
        for (r, &j) in idx.iter().enumerate() {
            y[j] = sol[n + r];
        }
        let gz = &p.g * &z;
        let scale = 1.0 + inf_norm(&gz);
        let yscale = 1.0 + inf_norm(&y);
        let mut changed = false;
        for j in 0..m {
            let equality = (p.upper[j] - p.lower[j]).abs() < 1e-12;
            match set[j] {
                Active::Lower if !equality && y[j] > POLISH_TOL * yscale => {
                    set[j] = Active::No;
                    changed = true;
                }
                Active::Upper if y[j] < -POLISH_TOL * yscale => {
                    set[j] = Active::No;
                    changed = true;
                }
                Active::No if gz[j] < p.lower[j] - POLISH_TOL * scale => {
                    set[j] = Active::Lower;
                    changed = true;
                }
                Active::No if gz[j] > p.upper[j] + POLISH_TOL * scale => {
                    set[j] = Active::Upper;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            return Some((z, y));
        }
    }
    None
}

/// LU solve of a (quasi-definite after regularization) KKT system with a few
/// steps of iterative refinement against the unregularized matrix.
fn solve_kkt(kkt: &DMatrix<f64>, rhs: &DVector<f64>, n: usize) -> Option<DVector<f64>> {
    let delta = 1e-12 * (1.0 + kkt.amax());
    let mut reg = kkt.clone();
    for i in 0..kkt.nrows() {
        reg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut x = lu.solve(rhs)?;
    for _ in 0..3 {
        let r = rhs - kkt * &x;
        x += lu.solve(&r)?;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves the QP. Returns `PrimalInfeasible` status when ADMM produces an
/// infeasibility certificate (the certificate is stored in `y`).
pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    solve_qp_warm(p, settings, None)
}

pub fn solve_qp_warm(
    p: &QpProblem,
    settings: &QpSettings,
    warm: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    let mut admm = Admm::new(p, settings)?;
    let mut sol = admm.solve(warm)?;
    if sol.status == QpStatus::Solved && settings.polish && p.num_constraints() > 0 {
        if let Some((z, y)) = polish(p, &sol) {
            let r_prim = p.violation(&z);
            let r_dual = inf_norm(&(&p.h * &z + &p.f + p.g.transpose() * &y));
            if r_prim <= sol.primal_residual.max(1e-9) && r_dual <= sol.dual_residual.max(1e-9) {
                sol.z = z;
                sol.y = y;
                sol.primal_residual = r_prim;
                sol.dual_residual = r_dual;
                sol.polished = true;
            }
        }
    }
    if settings.debug {
        let _ = writeln!(
            std::io::stderr(),
            "# qp done: iterations={} polished={}",
            sol.iterations,
            sol.polished
        );
    }
    Ok(sol)
}

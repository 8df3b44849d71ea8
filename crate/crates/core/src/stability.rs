//! Stability certificate for Δ-suboptimal MHE.
//!
//! The certificate combines three checks: the block LMI on every arrival
//! weight used at runtime, the contraction rate `ρ = (4 λ_max)^{1/M} γ`
//! computed from the largest generalized eigenvalue between arrival weights
//! `M` steps apart, and the resulting error bound
//!
//! ```text
//! ‖x̂_t − x_t‖_{P⁻¹} ≤ 2 √ρ^t ‖x̂_0 − x_0‖_{P_0⁻¹} + √(2Δ / (1 − ρ^M))
//!                    + 2 √(1 / (1 − √ρ)) · max_i ρ^{i/4} ‖ξ_{t−i−1}‖_{Q⁻¹}
//! ```
//!
//! which [`audit_trajectory`] evaluates step by step.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg::{check_spd, quad, spd_inverse, symmetrize};
use crate::{Error, Result};

/// Numerical slack for the "negative semidefinite" LMI test.
pub const LMI_TOL: f64 = 1e-10;
/// A satisfied certificate keeps `ρ` at least this far below one.
pub const RHO_MARGIN: f64 = 1e-12;

/// Largest eigenvalue of the pencil `(P2, P1)`, i.e. of `P1^{−1/2} P2 P1^{−1/2}`.
pub fn generalized_eig_max(p2: &DMatrix<f64>, p1: &DMatrix<f64>) -> Result<f64> {
    check_spd(p2, "P2")?;
    check_spd(p1, "P1")?;
    if p1.shape() != p2.shape() {
        return Err(Error::DimensionMismatch("pencil matrices differ in size".into()));
    }
    let l = p1.clone().cholesky().ok_or_else(|| Error::NotSpd("P1".into()))?.l();
    let l_inv = l.try_inverse().ok_or_else(|| Error::NotSpd("P1".into()))?;
    let s = symmetrize(&(&l_inv * p2 * l_inv.transpose()));
    Ok(s.symmetric_eigenvalues().max())
}

/// The symmetric block matrix
/// `[[AᵀP⁻¹A − γP⁻¹ − 2CᵀR⁻¹C, AᵀP⁻¹B − 2CᵀR⁻¹D], [·ᵀ, BᵀP⁻¹B − diag(Q⁻¹, 0) − 2DᵀR⁻¹D]]`
/// with `B = [I 0]` and `D = [0 I]`.
pub fn lmi_block(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = c.nrows();
    if a.shape() != (n, n) || c.ncols() != n || q.shape() != (n, n) || r.shape() != (m, m) || p.shape() != (n, n) {
        return Err(Error::DimensionMismatch("LMI operands are not conformable".into()));
    }
    let p_inv = spd_inverse(p)?;
    let q_inv = spd_inverse(q)?;
    let r_inv = spd_inverse(r)?;
    let mut b = DMatrix::zeros(n, n + m);
    b.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut d = DMatrix::zeros(m, n + m);
    d.view_mut((0, n), (m, m)).fill_with_identity();
    let mut q_bar = DMatrix::zeros(n + m, n + m);
    q_bar.view_mut((0, 0), (n, n)).copy_from(&q_inv);

    let m11 = a.transpose() * &p_inv * a - &p_inv * gamma - c.transpose() * &r_inv * c * 2.0;
    let m12 = a.transpose() * &p_inv * &b - c.transpose() * &r_inv * &d * 2.0;
    let m22 = b.transpose() * &p_inv * &b - q_bar - d.transpose() * &r_inv * &d * 2.0;

    let size = 2 * n + m;
    let mut block = DMatrix::zeros(size, size);
    block.view_mut((0, 0), (n, n)).copy_from(&m11);
    block.view_mut((0, n), (n, n + m)).copy_from(&m12);
    block.view_mut((n, 0), (n + m, n)).copy_from(&m12.transpose());
    block.view_mut((n, n), (n + m, n + m)).copy_from(&m22);
    Ok(symmetrize(&block))
}

/// Outcome of [`lmi_check`]: the worst block over the arrival weights.
#[derive(Clone, Debug)]
pub struct LmiVerdict {
    pub ok: bool,
    pub max_eigenvalue: f64,
    pub worst_block: DMatrix<f64>,
}

/// Checks the block LMI for every arrival weight in `p_sequence`.
pub fn lmi_check(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_sequence: &[DMatrix<f64>],
    gamma: f64,
) -> Result<LmiVerdict> {
    if p_sequence.is_empty() {
        return Err(Error::DimensionMismatch("empty arrival-weight sequence".into()));
    }
    let mut worst: Option<(f64, DMatrix<f64>)> = None;
    for p in p_sequence {
        let block = lmi_block(a, c, q, r, p, gamma)?;
        let top = block.symmetric_eigenvalues().max();
        if worst.as_ref().is_none_or(|(w, _)| top > *w) {
            worst = Some((top, block));
        }
    }
    let (max_eigenvalue, worst_block) = worst.expect("sequence is nonempty");
    Ok(LmiVerdict { ok: max_eigenvalue <= LMI_TOL, max_eigenvalue, worst_block })
}

/// `λ_max` over a realized arrival-weight sequence `P_0, P_1, …`:
/// pairs `(P_i⁻¹, P_{i−M}⁻¹)` for `i ≥ M` and `(P_i⁻¹, P_0⁻¹)` for `i < M`.
pub fn lambda_max_over_sequence(p_sequence: &[DMatrix<f64>], horizon: usize) -> Result<f64> {
    if p_sequence.is_empty() || horizon == 0 {
        return Err(Error::Domain("need a nonempty sequence and a positive horizon".into()));
    }
    let inv: Vec<DMatrix<f64>> = p_sequence.iter().map(spd_inverse).collect::<Result<_>>()?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..inv.len() {
        let anchor = if i < horizon { &inv[0] } else { &inv[i - horizon] };
        best = best.max(generalized_eig_max(&inv[i], anchor)?);
    }
    Ok(best)
}

/// Contraction rate, minimum horizon and whether `horizon` meets it.
pub fn rho_and_min_horizon(lambda_max: f64, gamma: f64, horizon: usize) -> Result<(f64, usize, bool)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("discount factor {gamma} outside (0, 1)")));
    }
    if !(lambda_max >= 0.25) {
        return Err(Error::Domain(format!("λ_max = {lambda_max} is below 1/4")));
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be positive".into()));
    }
    let rho = (4.0 * lambda_max).powf(1.0 / horizon as f64) * gamma;
    // smallest M with (4λ)^{1/M} γ < 1 − RHO_MARGIN
    let threshold = (4.0 * lambda_max).ln() / ((-RHO_MARGIN).ln_1p() - gamma.ln());
    let min_horizon = threshold.floor() as usize + 1;
    Ok((rho, min_horizon, horizon >= min_horizon && rho < 1.0 - RHO_MARGIN))
}

/// Everything the audit needs about a configuration.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityCert {
    pub lambda_max: f64,
    pub rho: f64,
    pub min_horizon: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lmi_ok: bool,
    pub lmi_max_eigenvalue: f64,
    #[serde(skip)]
    pub block_matrix: DMatrix<f64>,
}

impl StabilityCert {
    /// All hypotheses hold: LMI, `λ_max ≥ 1/4` and `M ≥ min_horizon`.
    pub fn satisfied(&self) -> bool {
        self.lmi_ok && self.horizon >= self.min_horizon && self.rho < 1.0
    }
}

/// Builds the certificate for an LTI model from its realized arrival weights.
pub fn certify_stability(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_sequence: &[DMatrix<f64>],
    gamma: f64,
    horizon: usize,
) -> Result<StabilityCert> {
    let lmi = lmi_check(a, c, q, r, p_sequence, gamma)?;
    let lambda_max = lambda_max_over_sequence(p_sequence, horizon)?;
    let (rho, min_horizon, _) = rho_and_min_horizon(lambda_max, gamma, horizon)?;
    Ok(StabilityCert {
        lambda_max,
        rho,
        min_horizon,
        horizon,
        gamma,
        lmi_ok: lmi.ok,
        lmi_max_eigenvalue: lmi.max_eigenvalue,
        block_matrix: lmi.worst_block,
    })
}

/// Right-hand side of the error bound at time `t`.
///
/// `process_noise` holds `ξ_0..ξ_{t−1}` (at least `t` entries).
pub fn error_bound(
    t: usize,
    initial_error: &DVector<f64>,
    process_noise: &[DVector<f64>],
    rho: f64,
    horizon: usize,
    delta: f64,
    p0_inv: &DMatrix<f64>,
    q_inv: &DMatrix<f64>,
) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("ρ = {rho} outside (0, 1)")));
    }
    if delta < 0.0 || process_noise.len() < t {
        return Err(Error::Domain("negative Δ or missing noise history".into()));
    }
    let sr = rho.sqrt();
    let initial = 2.0 * sr.powi(t as i32) * quad(initial_error, p0_inv).sqrt();
    let subopt = (2.0 * delta / (1.0 - rho.powi(horizon as i32))).sqrt();
    let noise = (0..t)
        .map(|i| rho.powf(i as f64 / 4.0) * quad(&process_noise[t - i - 1], q_inv).sqrt())
        .fold(0.0, f64::max);
    Ok(initial + subopt + 2.0 * (1.0 / (1.0 - sr)).sqrt() * noise)
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditRow {
    pub t: usize,
    pub weighted_error: f64,
    pub bound: f64,
    pub margin: f64,
    pub provenance: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub violations: usize,
    pub worst_margin: f64,
    /// Whether the certificate's hypotheses (LMI included) held. When false
    /// the bound is evaluated anyway but is only an empirical yardstick.
    pub hypotheses_hold: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,weighted_error,bound,margin,provenance")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{:e},{}", r.t, r.weighted_error, r.bound, r.margin, r.provenance)?;
        }
        Ok(())
    }
}

/// One audited estimate: `x̂_t`, the arrival weight `P_{t−M}` in force at
/// that step and where the estimate came from.
#[derive(Clone, Debug)]
pub struct AuditedEstimate {
    pub estimate: DVector<f64>,
    pub weight: DMatrix<f64>,
    pub provenance: String,
}

/// Compares each `‖x̂_t − x_t‖_{P⁻¹}` with its bound. `estimates[t]` belongs
/// to time `t`, starting with the initial guess at `t = 0`.
///
/// The bound needs `ρ < 1` and `M ≥ M_min`; the LMI status is only recorded
/// in [`AuditReport::hypotheses_hold`].
pub fn audit_trajectory(
    states: &[DVector<f64>],
    process_noise: &[DVector<f64>],
    estimates: &[AuditedEstimate],
    cert: &StabilityCert,
    delta: f64,
    p0: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<AuditReport> {
    if !(cert.rho < 1.0) || cert.horizon < cert.min_horizon {
        return Err(Error::Domain(format!(
            "ρ = {} with M = {} (minimum {}): the bound is undefined",
            cert.rho, cert.horizon, cert.min_horizon
        )));
    }
    if estimates.is_empty() || estimates.len() > states.len() {
        return Err(Error::DimensionMismatch("estimates do not match the trajectory".into()));
    }
    let p0_inv = spd_inverse(p0)?;
    let q_inv = spd_inverse(q)?;
    let initial_error = &estimates[0].estimate - &states[0];
    let mut rows = Vec::with_capacity(estimates.len());
    let mut violations = 0;
    let mut worst_margin = f64::INFINITY;
    for (t, est) in estimates.iter().enumerate() {
        let w_inv = spd_inverse(&est.weight)?;
        let weighted_error = quad(&(&est.estimate - &states[t]), &w_inv).sqrt();
        let bound = error_bound(t, &initial_error, process_noise, cert.rho, cert.horizon, delta, &p0_inv, &q_inv)?;
        let margin = bound - weighted_error;
        if margin < 0.0 {
            violations += 1;
        }
        worst_margin = worst_margin.min(margin);
        rows.push(AuditRow { t, weighted_error, bound, margin, provenance: est.provenance.clone() });
    }
    Ok(AuditReport { rows, violations, worst_margin, hypotheses_hold: cert.satisfied() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, b, c])
    }

    #[test]
    fn pencil_basics() {
        let p = spd2(2.0, 0.3, 1.0);
        assert!((generalized_eig_max(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((generalized_eig_max(&(&p * 2.0), &p).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(generalized_eig_max(&spd2(1.0, 2.0, 1.0), &p), Err(Error::NotSpd(_))));
    }

    #[test]
    fn pencil_matches_characteristic_root() {
        let p2 = spd2(3.0, 0.7, 1.5);
        let p1 = spd2(1.2, -0.2, 0.8);
        // det(P2 − λ P1) is a quadratic in λ; its larger root by bisection
        let det = |l: f64| {
            let m = &p2 - &p1 * l;
            m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
        };
        let (mut lo, mut hi) = (generalized_eig_max(&p2, &p1).unwrap() - 0.5, 100.0);
        lo = lo.max(0.0);
        let sign_hi = det(hi).signum();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if det(mid).signum() == sign_hi {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((generalized_eig_max(&p2, &p1).unwrap() - hi).abs() < 1e-9);
    }

    #[test]
    fn rho_examples() {
        let (rho, min_h, ok) = rho_and_min_horizon(1.0, 0.8, 10).unwrap();
        assert!((rho - 4f64.powf(0.1) * 0.8).abs() < 1e-15);
        assert!((rho - 0.9190).abs() < 1e-4);
        assert_eq!((min_h, ok), (7, true));
        let (rho, min_h, ok) = rho_and_min_horizon(1.0, 0.9, 10).unwrap();
        assert!((rho - 1.0338).abs() < 1e-4);
        assert_eq!((min_h, ok), (14, false));
        let (rho, min_h, ok) = rho_and_min_horizon(0.25, 0.6, 1).unwrap();
        assert_eq!((rho, min_h, ok), (0.6, 1, true));
        assert!(rho_and_min_horizon(0.2, 0.8, 10).is_err());
        assert!(rho_and_min_horizon(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn decoupled_block_for_zero_dynamics() {
        let z2 = DMatrix::zeros(2, 2);
        let c = DMatrix::zeros(1, 2);
        let p = spd2(2.0, 0.0, 4.0);
        let q = DMatrix::identity(2, 2) * 0.5;
        let r = DMatrix::identity(1, 1);
        let block = lmi_block(&z2, &c, &q, &r, &p, 0.5).unwrap();
        let p_inv = spd_inverse(&p).unwrap();
        assert!((block.view((0, 0), (2, 2)) - &p_inv * -0.5).amax() < 1e-14);
        assert!(block.view((0, 2), (2, 3)).amax() < 1e-14);
        // lower-right: diag(P⁻¹ − Q⁻¹, −2 R⁻¹)
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5 - 2.0, 0.25 - 2.0, -2.0]));
        assert!((block.view((2, 2), (3, 3)) - expect).amax() < 1e-14);
    }

    #[test]
    fn bound_terms() {
        let p0_inv = DMatrix::identity(2, 2);
        let q_inv = DMatrix::identity(2, 2);
        let zero = DVector::zeros(2);
        assert_eq!(error_bound(5, &zero, &vec![zero.clone(); 5], 0.5, 3, 0.0, &p0_inv, &q_inv).unwrap(), 0.0);
        let e0 = DVector::from_vec(vec![3.0, 4.0]);
        let xi = vec![DVector::from_vec(vec![0.0, 2.0])];
        let b = error_bound(1, &e0, &xi, 0.64, 3, 0.0, &p0_inv, &q_inv).unwrap();
        let expect = 2.0 * 0.8 * 5.0 + 2.0 * (1.0f64 / 0.2).sqrt() * 2.0;
        assert!((b - expect).abs() < 1e-12);
        assert!(error_bound(1, &e0, &xi, 1.0, 3, 0.0, &p0_inv, &q_inv).is_err());
    }
}

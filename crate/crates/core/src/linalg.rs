//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Eigenvalue floor used to call a symmetric matrix positive definite.
pub const SPD_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

pub fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSpd(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotSpd(format!("{what} has non-finite entries")));
    }
    if !is_symmetric(m, 1e-10) {
        return Err(Error::NotSpd(format!("{what} is not symmetric")));
    }
    let lo = min_eigenvalue(m);
    if lo <= SPD_TOL {
        return Err(Error::NotSpd(format!("{what} has eigenvalue {lo:e}")));
    }
    Ok(())
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Symmetric square root `S` with `S * S = m`.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        return Err(Error::NotSpd("negative eigenvalue in square root".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// `xᵀ W x`.
pub fn quad(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    x.dot(&(w * x))
}

/// 2-norm condition number of a symmetric matrix.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let ev = symmetrize(m).symmetric_eigenvalues();
    let hi = ev.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    let lo = ev.iter().fold(f64::INFINITY, |a, &l| a.min(l.abs()));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = spd_sqrt(&m).unwrap();
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn inverse_and_spd_check() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        assert!((&m * inv - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(check_spd(&m, "m").is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(check_spd(&bad, "bad"), Err(Error::NotSpd(_))));
    }
}

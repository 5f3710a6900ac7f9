//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a symmetric matrix counts as singular.
pub const SPD_REL_TOL: f64 = 1e-12;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric positive-definite matrix, or `err`.
pub fn spd_cholesky(m: &DMatrix<f64>, err: Error) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let s = symmetrize(m);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(err);
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.min();
    if max == 0.0 || min <= SPD_REL_TOL * max {
        return Err(err);
    }
    s.cholesky().ok_or(err)
}

pub fn spd_inverse(m: &DMatrix<f64>, err: Error) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(m, err)?.inverse())
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, err: Error) -> Result<DVector<f64>> {
    Ok(spd_cholesky(m, err)?.solve(b))
}

/// Symmetric inverse square root of an SPD matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>, err: Error) -> Result<DMatrix<f64>> {
    spd_cholesky(m, err)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Moore–Penrose inverse of a symmetric matrix restricted to eigenvalues above
/// `rel_tol * max|eigenvalue|`.
#[derive(Debug, Clone)]
pub struct TruncatedPinv {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    pub min_eigenvalue: f64,
    pub max_abs_eigenvalue: f64,
}

pub fn pinv_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> TruncatedPinv {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cut = rel_tol * max;
    let n = m.nrows();
    let mut pinv = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if max > 0.0 && lam > cut {
            let v = eig.eigenvectors.column(k);
            pinv += (v * v.transpose()) / lam;
            rank += 1;
        }
    }
    TruncatedPinv {
        pinv,
        rank,
        min_eigenvalue: if n == 0 { 0.0 } else { eig.eigenvalues.min() },
        max_abs_eigenvalue: max,
    }
}

/// Numerical rank by singular values relative to the largest.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_inverse(&m, Error::SingularSigma).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let inv = spd_inverse(&m, Error::SingularSigma).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15 && (inv[(1, 1)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_square_root_squares_to_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = inv_sqrt_spd(&m, Error::SingularSigma).unwrap();
        let back = &r * &m * &r;
        assert!((back - DMatrix::identity(2, 2)).norm() < 1e-13);
    }

    #[test]
    fn truncated_pinv_drops_null_direction() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1e-14]);
        let p = pinv_symmetric(&m, 1e-8);
        assert_eq!(p.rank, 1);
        assert!((p.pinv[(0, 0)] - 0.25).abs() < 1e-15 && p.pinv[(1, 1)] == 0.0);
    }
}

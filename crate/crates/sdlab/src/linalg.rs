//! Small dense-matrix helpers shared by the numeric modules.

use nalgebra::Cholesky;

use crate::{Error, Matrix, Result, Vector};

/// Force exact symmetry; downstream factorizations assume it.
pub(crate) fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn spd_cholesky(m: &Matrix, context: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::InvalidMixture(format!("{context}: matrix is not positive definite")))
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues from roundoff are clamped to zero.
pub(crate) fn sym_sqrt(m: &Matrix) -> Matrix {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root; eigenvalues floored at `floor` to keep the
/// result finite on near-singular inputs.
pub(crate) fn sym_inv_sqrt(m: &Matrix, floor: f64) -> Matrix {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

//! Small shared matrix helpers.

use nalgebra::{DMatrix, DVector};

/// `(M + M') / 2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(m.nrows(), m.ncols());
    (m + m.transpose()) * 0.5
}

/// Largest absolute deviation from symmetry, `max |M - M'|`.
pub(crate) fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let d = m - m.transpose();
    d.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = m.clone().symmetric_eigen().eigenvalues;
    ev.as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).expect("eigenvalue is NaN"));
    ev
}

/// Smallest and largest-magnitude eigenvalue of a symmetric matrix.
pub(crate) fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = symmetric_eigenvalues(m);
    let min = ev[0];
    let max_abs = ev.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    (min, max_abs)
}

/// Semidefiniteness test with the relative tolerance convention used across
/// the crate: passes when `λ_min >= -tol_rel * (1 + max |λ|)`.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn is_psd(m: &DMatrix<f64>, tol_rel: f64) -> bool {
    let (min, max_abs) = eigen_extremes(m);
    min >= -tol_rel * (1.0 + max_abs)
}

/// Strict definiteness: `λ_min > tol_rel * (1 + max |λ|)`.
pub(crate) fn is_pd(m: &DMatrix<f64>, tol_rel: f64) -> bool {
    let (min, max_abs) = eigen_extremes(m);
    min > tol_rel * (1.0 + max_abs)
}

/// Relative gap `‖a − b‖_F / (1 + ‖a‖_F)` between two matrices.
pub(crate) fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + a.norm())
}

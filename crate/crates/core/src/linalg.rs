//! Small dense linear algebra helpers shared across the crate.

use nalgebra::{DMatrix, SymmetricEigen};

/// Symmetrize a nearly-symmetric matrix (averages round-off asymmetry).
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.min()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_sym_eig(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.max()
}

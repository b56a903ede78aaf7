//! Small dense linear-algebra helpers shared across the crate: spectral
//! measures, symmetric inverse square roots, and Cholesky-based Gaussian
//! sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalue floor applied before inverting symmetric factors.
pub const EIG_FLOOR: f64 = 1e-12;

/// Largest absolute eigenvalue of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    debug_assert!(m.is_square());
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Largest singular value (the induced 2-norm), computed from the
/// symmetric eigendecomposition of MᵀM.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let eigs = gram.symmetric_eigenvalues();
    eigs.iter().fold(0.0_f64, |a, &b| a.max(b)).max(0.0).sqrt()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Inverse principal square root M^{-1/2} of a symmetric positive definite
/// matrix, via symmetric eigendecomposition. Eigenvalues below `EIG_FLOOR`
/// are a conditioning error.
pub fn inv_sqrt_spd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < EIG_FLOOR {
            return Err(Error::conditioning(format!(
                "{context}: eigenvalue {lambda:.3e} below floor {EIG_FLOOR:.0e}"
            )));
        }
        let s = lambda.sqrt().recip();
        scaled.column_mut(i).scale_mut(s);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Principal square root M^{1/2} of a symmetric positive semidefinite matrix;
/// negative eigenvalues within the floor are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(i).scale_mut(lambda.max(0.0).sqrt());
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_factor(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite { context: context.to_string() })
}

/// Draws one zero-mean Gaussian vector with covariance L·Lᵀ, where `chol_l`
/// is the lower Cholesky factor of the covariance.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, chol_l: &DMatrix<f64>) -> DVector<f64> {
    let n = chol_l.nrows();
    let std: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    chol_l * std
}

/// Symmetrizes a nearly symmetric matrix in place: (M + Mᵀ)/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    m.scale_mut(0.5);
}

/// True when the matrix is square, symmetric to `tol`, and has all
/// eigenvalues strictly positive.
pub fn is_spd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    min_symmetric_eigenvalue(m) > 0.0
}

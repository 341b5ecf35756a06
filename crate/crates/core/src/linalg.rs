//! Small dense linear-algebra helpers and the covariance newtype.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative tolerance for symmetry of a covariance matrix.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Relative eigenvalue floor for positive semidefiniteness.
pub const PSD_TOL: f64 = 1e-9;
/// Singular values below this fraction of the largest count as zero in rank tests.
pub const RANK_TOL: f64 = 1e-8;

/// Symmetric positive-semidefinite matrix: an error covariance or a Riccati
/// fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(DMatrix<f64>);

impl CovMatrix {
    /// Validates symmetry and positive semidefiniteness, then stores the
    /// exactly symmetrised matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("covariance has non-finite entries".into()));
        }
        if !is_symmetric(&m, SYMMETRY_TOL) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let m = symmetrize(&m);
        if !is_psd(&m, PSD_TOL) {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semidefinite (min eigenvalue {:e})",
                min_eigenvalue(&m)
            )));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix produced by a symmetry-preserving recursion.
    pub(crate) fn from_symmetric(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n) * s)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.0)
    }
}

impl AsRef<DMatrix<f64>> for CovMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().max()
}

/// `min eig >= -rel_tol * max(|max eig|, tiny)`.
pub fn is_psd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let eig = symmetrize(m).symmetric_eigenvalues();
    let hi = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    eig.min() >= -rel_tol * hi.max(f64::MIN_POSITIVE)
}

/// Principal square root of a symmetric PSD matrix; negative rounding noise
/// in the spectrum is clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Numerical rank with singular values thresholded relative to the largest.
pub fn complex_rank(m: &DMatrix<Complex64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * top).count()
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

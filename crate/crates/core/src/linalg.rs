//! Small dense linear-algebra helpers shared by the model and the spectral analysis.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative cut-off below which eigenvalues are treated as zero in pseudoinverses.
pub const PINV_RCOND: f64 = 1e-12;

/// Moore-Penrose pseudoinverse of a symmetric matrix via its eigendecomposition.
pub fn pinv_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = symmetrize(a).symmetric_eigen();
    let largest = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs()));
    let mut out = DMatrix::zeros(n, n);
    if largest == 0.0 {
        return out;
    }
    let cutoff = PINV_RCOND * largest;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cutoff {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    symmetrize(&out)
}

/// Eigenvalues of a general square matrix from a bounded real Schur iteration.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Internal("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Numerical rank with a cut-off relative to the largest singular value.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let largest = sv.iter().cloned().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * largest).count()
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    // Pad to a square matrix so the thin SVD yields a full right basis.
    let rows = a.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let largest = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..cols)
        .filter(|&k| largest == 0.0 || svd.singular_values[k] <= rel_tol * largest)
        .collect();
    let mut basis = DMatrix::zeros(cols, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        basis.set_column(j, &v_t.row(k).transpose());
    }
    basis
}

/// Orthonormal basis of `ker 1ᵀ` in `R^m`.
pub fn zero_sum_basis(m: usize) -> DMatrix<f64> {
    null_space(&DMatrix::from_element(1, m, 1.0), 1e-12)
}

/// Frobenius norm of `a - b` divided by the Frobenius norm of `b` (or absolute if `b` is zero).
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm();
    let d = (a - b).norm();
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one_projector() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let scaled = &p * 0.15;
        let pinv = pinv_symmetric(&scaled);
        let expected = &p / 0.15;
        assert!(rel_diff(&pinv, &expected) < 1e-12);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        assert_eq!(pinv_symmetric(&DMatrix::zeros(3, 3)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn null_space_of_wide_and_tall() {
        let wide = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let ns = null_space(&wide, 1e-12);
        assert_eq!(ns.ncols(), 2);
        assert!((&wide * &ns).norm() < 1e-12);
        let tall = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let ns = null_space(&tall, 1e-12);
        assert_eq!(ns.ncols(), 1);
        assert!((&tall * &ns).norm() < 1e-12);
        assert_eq!(rank(&tall, 1e-12), 1);
    }

    #[test]
    fn zero_sum_basis_is_orthonormal() {
        let b = zero_sum_basis(5);
        assert_eq!(b.shape(), (5, 4));
        assert!((b.transpose() * &b - DMatrix::identity(4, 4)).norm() < 1e-12);
        assert!((ones(5).transpose() * &b).norm() < 1e-12);
    }
}

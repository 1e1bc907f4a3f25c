//! Small wrappers around nalgebra's symmetric eigendecomposition and
//! Cholesky factorization, plus a few matrix helpers used throughout.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{CafeError, Result};

/// Maximum absolute asymmetry tolerated before a matrix is rejected as
/// non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Returns the largest absolute difference between `m` and its transpose.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// (M + Mᵀ)/2, killing rounding asymmetry after accumulation.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending and the
/// eigenvector columns reordered to match.
pub fn sym_eigen_ascending(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(CafeError::invalid("eigendecomposition requires a square matrix"));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| CafeError::numerical("symmetric eigen-solver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Same as [`sym_eigen_ascending`] but sorted descending.
pub fn sym_eigen_descending(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (values, vectors) = sym_eigen_ascending(m)?;
    let n = values.len();
    let rev_values = DVector::from_iterator(n, (0..n).rev().map(|i| values[i]));
    let mut rev_vectors = DMatrix::zeros(n, n);
    for (dst, src) in (0..n).rev().enumerate() {
        rev_vectors.set_column(dst, &vectors.column(src));
    }
    Ok((rev_values, rev_vectors))
}

/// Cholesky factorization of a symmetric positive definite matrix.
/// Returns `None` when the matrix is not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// log det of an SPD matrix from its Cholesky factor: 2 Σ log L_jj.
pub fn logdet_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for j in 0..l.nrows() {
        acc += l[(j, j)].ln();
    }
    2.0 * acc
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues below
/// `-tol` are an error; small negatives are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_ascending(m)?;
    let n = values.len();
    let mut scaled = vectors.clone();
    for j in 0..n {
        let v = values[j];
        if v < -tol {
            return Err(CafeError::numerical(format!(
                "matrix square root of a non-PSD matrix (eigenvalue {v:.3e})"
            )));
        }
        let root = v.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(root);
    }
    Ok(&scaled * vectors.transpose())
}

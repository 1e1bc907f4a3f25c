//! First- and second-order feature statistics.
//!
//! A feature matrix holds one sample per row. Statistics use population
//! normalization (1/n) and are computed in two passes: mean first, then
//! centered outer products. The accumulated covariance is symmetrized as
//! (C + Cᵀ)/2 to kill rounding asymmetry.

use nalgebra::{DMatrix, DVector};

use crate::error::{CafeError, Result};
use crate::linalg;

/// n×d matrix of feature activations, one sample per row.
pub type FeatureMatrix = DMatrix<f64>;

/// Mean vector and full covariance matrix of a feature sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Number of samples the statistics were estimated from.
    pub count: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(CafeError::invalid("statistics require at least one sample"));
        }
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(CafeError::invalid("mean/covariance dimension mismatch"));
        }
        if linalg::max_asymmetry(&cov) > 1e-10 {
            return Err(CafeError::invalid("covariance is not symmetric"));
        }
        Ok(FeatureStats { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and population covariance of the rows of `features`.
pub fn compute_feature_stats(features: &FeatureMatrix) -> Result<FeatureStats> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 || d == 0 {
        return Err(CafeError::invalid("feature matrix must be non-empty"));
    }
    if !linalg::all_finite(features) {
        return Err(CafeError::invalid("feature matrix contains non-finite entries"));
    }

    let scale = 1.0 / n as f64;
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += features.row(i).transpose();
    }
    mean *= scale;

    let mut centered = features.clone();
    for i in 0..n {
        let mut row = centered.row_mut(i);
        row -= mean.transpose();
    }
    let cov = linalg::symmetrize(&(centered.transpose() * &centered * scale));

    Ok(FeatureStats { mean, cov, count: n })
}

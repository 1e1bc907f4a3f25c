//! Feature alignment loss: per-group symmetric Gaussian KL divergence between
//! target batch statistics and pre-computed source statistics, evaluated in
//! the source eigenbasis where the source covariance is diagonal.
//!
//! For group G with source mean μ_G, eigenvectors V (columns), clipped
//! eigenvalues λ, and target batch stats (μᵗ_G, Σᵗ_G), the transformed target
//! is m = Vᵀ(μᵗ_G − μ_G), S = VᵀΣᵗ_GV, and the source is analytically
//! (0, diag(λ)). Both KL directions then reduce to:
//!
//!   kl(t‖s) = ½[Σⱼ log λⱼ − log det S − |G| + Σⱼ Sⱼⱼ/λⱼ + Σⱼ mⱼ²/λⱼ]
//!   kl(s‖t) = ½[log det S − Σⱼ log λⱼ − |G| + tr(S⁻¹Λ) + mᵀS⁻¹m]
//!
//! log det S goes through a Cholesky factorization, whose failure is exactly
//! the degenerate-batch condition (target batch covariance not positive
//! definite for some group).
//!
//! The gradient with respect to the raw feature batch is a hand-derived
//! adjoint; finite-difference agreement is enforced by tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{CafeError, Result};
use crate::grouping::{max_group_size, GroupPartition};
use crate::linalg;
use crate::stats::{compute_feature_stats, FeatureMatrix, FeatureStats};

/// Per-group source statistics in eigenbasis form: everything adaptation
/// needs from the source domain, and the only artifact that travels from
/// the training environment to the test environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGroup {
    /// group mean in original feature coordinates, length |G|
    pub mean: DVector<f64>,
    /// eigenvalues after clipping, sorted descending
    pub eigenvalues: DVector<f64>,
    /// eigenvectors as columns, |G|×|G| orthonormal
    pub eigenvectors: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSourceStats {
    partition: GroupPartition,
    groups: Vec<SourceGroup>,
    epsilon: f64,
}

impl GroupedSourceStats {
    /// Validates shapes, orthonormality (within 1e-8), descending order, and
    /// the clipping floor before assembling.
    pub fn new(partition: GroupPartition, groups: Vec<SourceGroup>, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(CafeError::invalid("epsilon must be finite and >= 0"));
        }
        if groups.len() != partition.k() {
            return Err(CafeError::invalid(format!(
                "{} groups provided for a partition with k={}",
                groups.len(),
                partition.k()
            )));
        }
        for (i, (members, group)) in partition.groups().iter().zip(&groups).enumerate() {
            let g = members.len();
            if group.mean.len() != g
                || group.eigenvalues.len() != g
                || group.eigenvectors.shape() != (g, g)
            {
                return Err(CafeError::invalid(format!(
                    "group {i}: statistics shapes do not match group size {g}"
                )));
            }
            let v = &group.eigenvectors;
            let gram_err = (v.transpose() * v - DMatrix::identity(g, g)).abs().max();
            if gram_err > 1e-8 {
                return Err(CafeError::invalid(format!(
                    "group {i}: eigenvectors not orthonormal (VᵀV deviates by {gram_err:.2e})"
                )));
            }
            for w in group.eigenvalues.as_slice().windows(2) {
                if w[0] < w[1] {
                    return Err(CafeError::invalid(format!(
                        "group {i}: eigenvalues must be sorted descending"
                    )));
                }
            }
            if epsilon > 0.0 && group.eigenvalues.iter().any(|&l| l < epsilon) {
                return Err(CafeError::invalid(format!(
                    "group {i}: eigenvalue below the clipping floor {epsilon}"
                )));
            }
        }
        Ok(GroupedSourceStats {
            partition,
            groups,
            epsilon,
        })
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn groups(&self) -> &[SourceGroup] {
        &self.groups
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn k(&self) -> usize {
        self.partition.k()
    }

    /// Raises the clipping floor to `epsilon` (λ ← max(λ, ε)). Lowering is
    /// impossible — the raw spectrum below the stored floor is gone.
    pub fn reclip(&self, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(CafeError::invalid("epsilon must be finite and >= 0"));
        }
        let groups = self
            .groups
            .iter()
            .map(|g| SourceGroup {
                mean: g.mean.clone(),
                eigenvalues: g.eigenvalues.map(|l| l.max(epsilon)),
                eigenvectors: g.eigenvectors.clone(),
            })
            .collect();
        GroupedSourceStats::new(self.partition.clone(), groups, epsilon.max(self.epsilon))
    }

    /// Full-dimensional mean (exact) and block-diagonal covariance
    /// reconstruction Σ_G = V diag(λ) Vᵀ per group (zero across groups —
    /// cross-group covariance is not stored).
    pub fn reconstruct_block_stats(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for (members, group) in self.partition.groups().iter().zip(&self.groups) {
            let block = &group.eigenvectors
                * DMatrix::from_diagonal(&group.eigenvalues)
                * group.eigenvectors.transpose();
            for (a, &i) in members.iter().enumerate() {
                mean[i] = group.mean[a];
                for (b, &j) in members.iter().enumerate() {
                    cov[(i, j)] = block[(a, b)];
                }
            }
        }
        (mean, linalg::symmetrize(&cov))
    }
}

/// Target group statistics mapped into the source eigenbasis.
#[derive(Debug, Clone)]
pub struct TransformedStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AlignmentLossResult {
    pub loss: f64,
    pub per_group_kl_ts: Vec<f64>,
    pub per_group_kl_st: Vec<f64>,
    /// ∂loss/∂z_i for every sample in the batch, n×d
    pub grad_features: DMatrix<f64>,
}

/// Eigendecomposition of a group's source covariance with eigenvalue
/// clipping λ ← max(λ, ε). Eigenvalues come back sorted descending with
/// eigenvectors as matching columns.
pub fn eigendecompose_and_clip(
    cov: &DMatrix<f64>,
    epsilon: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(CafeError::invalid("epsilon must be finite and >= 0"));
    }
    let asym = linalg::max_asymmetry(cov);
    if asym > linalg::SYMMETRY_TOL {
        return Err(CafeError::invalid(format!(
            "covariance asymmetric by {asym:.2e}, beyond tolerance {:.0e}",
            linalg::SYMMETRY_TOL
        )));
    }
    let (values, vectors) = linalg::sym_eigen_descending(&linalg::symmetrize(cov))?;
    let clipped = values.map(|l| l.max(epsilon));
    Ok((vectors, clipped))
}

/// m = Vᵀ(μᵗ − μˢ), S = VᵀΣᵗV. The source side needs no numerical
/// counterpart: in this basis it is exactly (0, diag(λ)).
pub fn transform_target_stats(
    target_mean: &DVector<f64>,
    target_cov: &DMatrix<f64>,
    source_mean: &DVector<f64>,
    eigenvectors: &DMatrix<f64>,
) -> Result<TransformedStats> {
    let g = source_mean.len();
    if target_mean.len() != g || target_cov.shape() != (g, g) || eigenvectors.shape() != (g, g) {
        return Err(CafeError::invalid("group statistic shapes are inconsistent"));
    }
    let mean = eigenvectors.transpose() * (target_mean - source_mean);
    let cov = linalg::symmetrize(&(eigenvectors.transpose() * target_cov * eigenvectors));
    Ok(TransformedStats { mean, cov })
}

/// log det via Cholesky (2 Σⱼ log Lⱼⱼ). Failure means the matrix is not
/// positive definite — the degenerate-batch condition for `group`.
pub fn logdet_via_cholesky(m: &DMatrix<f64>, group: usize) -> Result<f64> {
    let chol = linalg::cholesky(m).ok_or_else(|| CafeError::degenerate(group))?;
    Ok(linalg::logdet_from_cholesky(&chol))
}

/// Both KL directions for one group given the transformed target statistics
/// and the clipped source eigenvalues. `group` is carried for error context.
pub fn group_kl(
    transformed: &TransformedStats,
    eigenvalues: &DVector<f64>,
    group: usize,
) -> Result<(f64, f64)> {
    let g = eigenvalues.len();
    if transformed.mean.len() != g || transformed.cov.shape() != (g, g) {
        return Err(CafeError::invalid("transformed statistics shape mismatch"));
    }
    if eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(CafeError::numerical(format!(
            "group {group}: source eigenvalue <= 0; clipping with a positive epsilon is required"
        )));
    }
    let m = &transformed.mean;
    let s = &transformed.cov;
    let chol = linalg::cholesky(s).ok_or_else(|| CafeError::degenerate(group))?;
    let logdet_t = linalg::logdet_from_cholesky(&chol);
    let logdet_s: f64 = eigenvalues.iter().map(|l| l.ln()).sum();
    let gf = g as f64;

    let trace_ts: f64 = (0..g).map(|j| s[(j, j)] / eigenvalues[j]).sum();
    let maha_ts: f64 = (0..g).map(|j| m[j] * m[j] / eigenvalues[j]).sum();
    let kl_ts = 0.5 * (logdet_s - logdet_t - gf + trace_ts + maha_ts);

    let s_inv = chol.inverse();
    let trace_st: f64 = (0..g).map(|j| s_inv[(j, j)] * eigenvalues[j]).sum();
    let maha_st = (m.transpose() * &s_inv * m)[(0, 0)];
    let kl_st = 0.5 * (logdet_t - logdet_s - gf + trace_st + maha_st);

    for (label, kl) in [("kl(t‖s)", kl_ts), ("kl(s‖t)", kl_st)] {
        if !kl.is_finite() {
            return Err(CafeError::numerical(format!(
                "group {group}: {label} is not finite"
            )));
        }
        if kl < -1e-8 {
            return Err(CafeError::numerical(format!(
                "group {group}: {label} = {kl:.3e} is negative beyond tolerance"
            )));
        }
    }
    Ok((kl_ts, kl_st))
}

/// The alignment loss L_a = (1/k) Σ_G ½(kl(t‖s) + kl(s‖t)) over a target
/// feature batch, with its gradient with respect to every feature entry.
///
/// Degenerate batches (a group at least as large as the batch, or a target
/// group covariance that fails Cholesky) surface as errors; target
/// covariances are deliberately never regularized.
pub fn feature_alignment_loss(
    features: &FeatureMatrix,
    source: &GroupedSourceStats,
) -> Result<AlignmentLossResult> {
    let n = features.nrows();
    let d = features.ncols();
    if d != source.dim() {
        return Err(CafeError::invalid(format!(
            "features have {d} dimensions but source statistics cover {}",
            source.dim()
        )));
    }
    if n < 2 {
        return Err(CafeError::invalid("alignment needs a batch of at least 2"));
    }
    if max_group_size(source.partition()) > n {
        let group = source
            .partition()
            .groups()
            .iter()
            .position(|g| g.len() > n)
            .unwrap();
        return Err(CafeError::degenerate(group));
    }

    let batch = compute_feature_stats(features)?;
    let k = source.k();
    let weight = 1.0 / (2.0 * k as f64);

    let mut loss = 0.0;
    let mut per_group_kl_ts = Vec::with_capacity(k);
    let mut per_group_kl_st = Vec::with_capacity(k);
    // gradients w.r.t. the full batch mean and covariance, accumulated
    // per group into disjoint sub-blocks
    let mut grad_mean = DVector::zeros(d);
    let mut grad_cov = DMatrix::zeros(d, d);

    for (idx, (members, group)) in source
        .partition()
        .groups()
        .iter()
        .zip(source.groups())
        .enumerate()
    {
        let g = members.len();
        let mu_t = DVector::from_iterator(g, members.iter().map(|&i| batch.mean[i]));
        let cov_t = DMatrix::from_fn(g, g, |r, c| batch.cov[(members[r], members[c])]);
        let transformed = transform_target_stats(&mu_t, &cov_t, &group.mean, &group.eigenvectors)?;
        let (kl_ts, kl_st) = group_kl(&transformed, &group.eigenvalues, idx)?;
        loss += weight * (kl_ts + kl_st);
        per_group_kl_ts.push(kl_ts);
        per_group_kl_st.push(kl_st);

        // Adjoint in the eigenbasis. With m, S, Λ = diag(λ) as above:
        //   ∂kl(t‖s)/∂m = Λ⁻¹m            ∂kl(t‖s)/∂S = ½(Λ⁻¹ − S⁻¹)
        //   ∂kl(s‖t)/∂m = S⁻¹m            ∂kl(s‖t)/∂S = ½(S⁻¹ − S⁻¹ΛS⁻¹ − S⁻¹mmᵀS⁻¹)
        // The ∓½S⁻¹ terms cancel in the sum.
        let m = &transformed.mean;
        let s = &transformed.cov;
        let chol = linalg::cholesky(s).ok_or_else(|| CafeError::degenerate(idx))?;
        let s_inv = chol.inverse();
        let lambda_inv = DVector::from_iterator(g, group.eigenvalues.iter().map(|&l| 1.0 / l));
        let s_inv_m = &s_inv * m;

        let grad_m = DVector::from_fn(g, |j, _| lambda_inv[j] * m[j]) + &s_inv_m;
        let mut grad_s = DMatrix::from_diagonal(&lambda_inv);
        let s_inv_lambda_s_inv =
            &s_inv * DMatrix::from_diagonal(&group.eigenvalues) * &s_inv;
        grad_s -= s_inv_lambda_s_inv;
        grad_s -= &s_inv_m * s_inv_m.transpose();
        grad_s *= 0.5;

        // back to original coordinates: m = Vᵀ(μᵗ−μˢ), S = VᵀΣᵗV
        let grad_mu_g = &group.eigenvectors * (grad_m * weight);
        let grad_cov_g = &group.eigenvectors * (grad_s * weight) * group.eigenvectors.transpose();
        for (a, &i) in members.iter().enumerate() {
            grad_mean[i] += grad_mu_g[a];
            for (b, &j) in members.iter().enumerate() {
                grad_cov[(i, j)] += grad_cov_g[(a, b)];
            }
        }
    }

    // Through the batch statistics: μ = (1/n)Σz_i, Σ = (1/n)Σ(z_i−μ)(z_i−μ)ᵀ
    // gives ∂L/∂z_i = (1/n)·∂L/∂μ + (2/n)·(∂L/∂Σ)(z_i − μ); the ∂μ terms
    // inside Σ vanish because Σ_i (z_i − μ) = 0.
    let grad_cov = linalg::symmetrize(&grad_cov);
    let inv_n = 1.0 / n as f64;
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= batch.mean.transpose();
    }
    let mut grad_features = centered * &grad_cov * (2.0 * inv_n);
    for mut row in grad_features.row_iter_mut() {
        row += (inv_n * &grad_mean).transpose();
    }

    Ok(AlignmentLossResult {
        loss,
        per_group_kl_ts,
        per_group_kl_st,
        grad_features,
    })
}

/// Central finite differences over every feature entry against the analytic
/// gradient; returns the maximum relative error over components whose
/// magnitude exceeds 1e-6.
pub fn grad_check_alignment(
    features: &FeatureMatrix,
    source: &GroupedSourceStats,
    h: f64,
) -> Result<f64> {
    let analytic = feature_alignment_loss(features, source)?;
    let mut max_rel: f64 = 0.0;
    let mut probe = features.clone();
    for r in 0..features.nrows() {
        for c in 0..features.ncols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + h;
            let plus = feature_alignment_loss(&probe, source)?.loss;
            probe[(r, c)] = orig - h;
            let minus = feature_alignment_loss(&probe, source)?.loss;
            probe[(r, c)] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic.grad_features[(r, c)];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-6 {
                max_rel = max_rel.max((fd - an).abs() / scale);
            }
        }
    }
    Ok(max_rel)
}

/// Builds the portable source statistics: per-group extraction followed by
/// eigendecomposition and clipping.
pub fn build_grouped_stats(
    stats: &FeatureStats,
    partition: &GroupPartition,
    epsilon: f64,
) -> Result<GroupedSourceStats> {
    let groups = crate::grouping::extract_group_stats(stats, partition)?
        .into_iter()
        .map(|(mean, cov)| {
            let (eigenvectors, eigenvalues) = eigendecompose_and_clip(&cov, epsilon)?;
            Ok(SourceGroup {
                mean,
                eigenvalues,
                eigenvectors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GroupedSourceStats::new(partition.clone(), groups, epsilon)
}

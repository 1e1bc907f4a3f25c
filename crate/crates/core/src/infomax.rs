//! Infomax loss over a batch of softmax predictions:
//!
//!   L = −(1/B) Σ_i Σ_j p̂_ij log p̂_ij + Σ_j p̄_j log p̄_j,  p̄ = (1/B) Σ_i p̂_i
//!
//! i.e. mean prediction entropy minus marginal entropy. Minimizing drives
//! predictions that are individually confident but diverse across the batch.
//! x log x is extended by continuity at zero via a 1e-12 floor inside the
//! log only, so exact zeros contribute nothing.

use nalgebra::DMatrix;

use crate::error::{CafeError, Result};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PredictionBatch {
    logits: DMatrix<f64>,
    probs: DMatrix<f64>,
}

/// Numerically stable row-wise softmax (shift by the row max).
pub(crate) fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut probs = logits.clone();
    for mut row in probs.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row /= total;
    }
    probs
}

impl PredictionBatch {
    pub fn from_logits(logits: DMatrix<f64>) -> Result<Self> {
        validate_shape(&logits)?;
        let probs = softmax_rows(&logits);
        Ok(PredictionBatch { logits, probs })
    }

    /// Builds a batch directly from probability rows (each summing to 1
    /// within 1e-8). Logits are recovered as log p, which is consistent
    /// because softmax(log p) = p.
    pub fn from_probs(probs: DMatrix<f64>) -> Result<Self> {
        validate_shape(&probs)?;
        for (i, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(CafeError::invalid(format!("row {i} has a negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(CafeError::invalid(format!(
                    "row {i} sums to {sum}, not 1 within 1e-8"
                )));
            }
        }
        let logits = probs.map(|p| p.max(LOG_FLOOR).ln());
        Ok(PredictionBatch { logits, probs })
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.probs.ncols()
    }
}

fn validate_shape(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() < 1 {
        return Err(CafeError::invalid("prediction batch must have B >= 1"));
    }
    if m.ncols() < 2 {
        return Err(CafeError::invalid("prediction batch must have C >= 2"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CafeError::invalid("non-finite prediction entries"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct InfomaxResult {
    pub loss: f64,
    /// ∂loss/∂logits, B×C
    pub grad_logits: DMatrix<f64>,
}

fn xlogx(p: f64) -> f64 {
    p * p.max(LOG_FLOOR).ln()
}

pub fn infomax_loss(batch: &PredictionBatch) -> InfomaxResult {
    let p = &batch.probs;
    let b = p.nrows();
    let c = p.ncols();
    let inv_b = 1.0 / b as f64;

    let marginal: Vec<f64> = (0..c).map(|j| p.column(j).sum() * inv_b).collect();
    let mean_entropy = -inv_b * p.iter().map(|&v| xlogx(v)).sum::<f64>();
    let neg_marginal_entropy: f64 = marginal.iter().map(|&v| xlogx(v)).sum();
    let loss = mean_entropy + neg_marginal_entropy;

    // ∂L/∂p_ij = (1/B)(log p̄_j − log p_ij): the +1 terms from both entropies
    // cancel because Σ_j ∂p_ij is constrained only through the softmax below.
    let mut grad_p = DMatrix::zeros(b, c);
    for i in 0..b {
        for j in 0..c {
            grad_p[(i, j)] =
                inv_b * (marginal[j].max(LOG_FLOOR).ln() - p[(i, j)].max(LOG_FLOOR).ln());
        }
    }
    // chain through softmax: ∂L/∂ℓ_ij = p_ij (g_ij − Σ_k g_ik p_ik)
    let mut grad_logits = DMatrix::zeros(b, c);
    for i in 0..b {
        let dot: f64 = (0..c).map(|k| grad_p[(i, k)] * p[(i, k)]).sum();
        for j in 0..c {
            grad_logits[(i, j)] = p[(i, j)] * (grad_p[(i, j)] - dot);
        }
    }

    InfomaxResult { loss, grad_logits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_hot(rows: &[usize], c: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), c);
        for (i, &j) in rows.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    #[test]
    fn uniform_probabilities_give_zero_loss() {
        let batch =
            PredictionBatch::from_probs(DMatrix::from_element(6, 4, 0.25)).unwrap();
        let r = infomax_loss(&batch);
        assert!(r.loss.abs() < 1e-9, "loss {}", r.loss);
        // uniform is a critical point: both entropy gradients balance
        assert!(r.grad_logits.abs().max() < 1e-12);
    }

    #[test]
    fn diverse_one_hot_reaches_minimum() {
        let c = 5;
        let batch = PredictionBatch::from_probs(one_hot(&[0, 1, 2, 3, 4], c)).unwrap();
        let r = infomax_loss(&batch);
        assert!((r.loss + (c as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn collapsed_one_hot_gives_zero() {
        let batch = PredictionBatch::from_probs(one_hot(&[2, 2, 2, 2], 4)).unwrap();
        let r = infomax_loss(&batch);
        assert!(r.loss.abs() < 1e-9);
    }

    #[test]
    fn from_probs_validates_rows() {
        assert!(PredictionBatch::from_probs(dmatrix![0.5, 0.4]).is_err());
        assert!(PredictionBatch::from_probs(dmatrix![1.2, -0.2]).is_err());
        assert!(PredictionBatch::from_probs(dmatrix![1.0]).is_err());
        assert!(PredictionBatch::from_logits(dmatrix![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let logits = DMatrix::from_fn(8, 5, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * 1.5
        });
        let batch = PredictionBatch::from_logits(logits.clone()).unwrap();
        let analytic = infomax_loss(&batch);

        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for r in 0..8 {
            for c in 0..5 {
                let mut plus = logits.clone();
                plus[(r, c)] += h;
                let mut minus = logits.clone();
                minus[(r, c)] -= h;
                let fp = infomax_loss(&PredictionBatch::from_logits(plus).unwrap()).loss;
                let fm = infomax_loss(&PredictionBatch::from_logits(minus).unwrap()).loss;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.grad_logits[(r, c)];
                let scale = fd.abs().max(an.abs());
                if scale > 1e-7 {
                    max_rel = max_rel.max((fd - an).abs() / scale);
                }
            }
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn gradient_descent_reaches_diverse_one_hot_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut logits = DMatrix::from_fn(4, 4, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g
        });
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let batch = PredictionBatch::from_logits(logits.clone()).unwrap();
            let r = infomax_loss(&batch);
            last = r.loss;
            logits -= r.grad_logits * 20.0;
        }
        let target = -(4.0f64).ln();
        assert!(
            (last - target).abs() < 1e-3,
            "converged to {last}, expected {target}"
        );
    }

    proptest! {
        #[test]
        fn loss_is_bounded_by_log_c(
            b in 1usize..10,
            c in 2usize..8,
            raw in proptest::collection::vec(-4.0f64..4.0, 80)
        ) {
            let logits = DMatrix::from_fn(b, c, |i, j| raw[i * 8 + j]);
            let r = infomax_loss(&PredictionBatch::from_logits(logits).unwrap());
            let bound = (c as f64).ln() + 1e-9;
            prop_assert!(r.loss >= -bound && r.loss <= bound, "loss {}", r.loss);
        }

        #[test]
        fn permutation_invariance(
            b in 2usize..6,
            c in 2usize..6,
            raw in proptest::collection::vec(-3.0f64..3.0, 36),
            row_swap in (0usize..6, 0usize..6),
            col_swap in (0usize..6, 0usize..6)
        ) {
            let logits = DMatrix::from_fn(b, c, |i, j| raw[i * 6 + j]);
            let base = infomax_loss(&PredictionBatch::from_logits(logits.clone()).unwrap()).loss;

            let mut rows = logits.clone();
            rows.swap_rows(row_swap.0 % b, row_swap.1 % b);
            let by_rows = infomax_loss(&PredictionBatch::from_logits(rows).unwrap()).loss;
            prop_assert!((base - by_rows).abs() < 1e-12);

            let mut cols = logits;
            cols.swap_columns(col_swap.0 % c, col_swap.1 % c);
            let by_cols = infomax_loss(&PredictionBatch::from_logits(cols).unwrap()).loss;
            prop_assert!((base - by_cols).abs() < 1e-12);
        }
    }
}

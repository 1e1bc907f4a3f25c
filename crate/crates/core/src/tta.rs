//! Orchestration of the two-step procedure: pre-compute portable source
//! statistics once in the training environment, then adapt the extractor on
//! unlabeled target batches by minimizing alignment + infomax losses with
//! momentum SGD, offline (shuffled epochs, evaluate at the end) or online
//! (one optimization step per streamed batch, predict immediately after).

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_grouped_stats, feature_alignment_loss, GroupedSourceStats};
use crate::bench::frechet_distance;
use crate::error::{CafeError, Result};
use crate::grouping::{correlation_adjacency, max_group_size, spectral_cluster};
use crate::infomax::{infomax_loss, PredictionBatch};
use crate::model::{accuracy, predict_labels, select_rows, GradientSet, ToyModel};
use crate::optim::{sgd_momentum_step, MomentumState};
use crate::stats::{compute_feature_stats, FeatureStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTAConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub k: usize,
    pub epsilon: f64,
    pub use_align: bool,
    pub use_infomax: bool,
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
}

impl TTAConfig {
    /// Stock hyperparameters: lr 0.001, momentum 0.8, batch 256, k capped
    /// at 128, ε = 1e-5, both loss terms on, offline, one epoch.
    pub fn defaults(feature_dim: usize) -> Self {
        TTAConfig {
            lr: 1e-3,
            momentum: 0.8,
            batch_size: 256,
            k: feature_dim.min(128),
            epsilon: 1e-5,
            use_align: true,
            use_infomax: true,
            mode: Mode::Offline,
            seed: 0,
            epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CafeError::invalid("lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CafeError::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(CafeError::invalid("batch_size must be at least 2"));
        }
        if self.k == 0 {
            return Err(CafeError::invalid("k must be at least 1"));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(CafeError::invalid("epsilon must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(CafeError::invalid("epochs must be at least 1"));
        }
        if self.mode == Mode::Online && self.epochs != 1 {
            return Err(CafeError::invalid("online mode streams each batch once: epochs must be 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTAReport {
    pub config: TTAConfig,
    /// per-step traces; all have length = number of optimization steps
    pub loss_align: Vec<f64>,
    pub loss_infomax: Vec<f64>,
    pub loss_total: Vec<f64>,
    /// per-step, per-group KL values (empty when alignment is disabled)
    pub per_group_kl_ts: Vec<Vec<f64>>,
    pub per_group_kl_st: Vec<Vec<f64>>,
    /// online mode: accuracy accumulated over the stream after each batch
    pub running_accuracy: Vec<f64>,
    pub accuracy: Option<f64>,
    pub frechet_before: Option<f64>,
    pub frechet_after: Option<f64>,
    pub degeneracy_events: Vec<String>,
    pub batches_consumed: usize,
    pub wall_time_secs: f64,
}

impl TTAReport {
    pub fn steps(&self) -> usize {
        self.loss_total.len()
    }
}

/// Step 1: extract source features, estimate statistics, build the
/// correlation groups, and eigendecompose each group with clipping floor
/// `epsilon`. The result is the portable artifact; the partition is frozen
/// here and never recomputed at test time.
pub fn precompute_source_stats(
    model: &ToyModel,
    source_inputs: &DMatrix<f64>,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GroupedSourceStats> {
    let (features, _) = model.forward(source_inputs)?;
    let d = features.ncols();
    if features.nrows() < d {
        log::warn!(
            "only {} source samples for {d} feature dimensions; source covariance is necessarily rank-deficient",
            features.nrows()
        );
    }
    let stats = compute_feature_stats(&features)?;
    let adjacency = correlation_adjacency(&stats);
    let partition = spectral_cluster(&adjacency, k, seed)?;
    build_grouped_stats(&stats, &partition, epsilon)
}

/// Offline adaptation: shuffled mini-batch epochs over the full target set,
/// then a final prediction pass with the adapted model.
pub fn adapt_offline(
    model: &ToyModel,
    target_inputs: &DMatrix<f64>,
    target_labels: Option<&[u32]>,
    stats: &GroupedSourceStats,
    config: &TTAConfig,
) -> Result<(ToyModel, TTAReport)> {
    if config.mode != Mode::Offline {
        return Err(CafeError::invalid("adapt_offline requires mode = offline"));
    }
    run_adaptation(model, target_inputs, target_labels, stats, config)
}

/// Online adaptation: each mini-batch is seen exactly once — one optimization
/// step, then an immediate prediction on that same batch with the updated
/// model. Accuracy is accumulated over the stream.
pub fn adapt_online(
    model: &ToyModel,
    target_inputs: &DMatrix<f64>,
    target_labels: Option<&[u32]>,
    stats: &GroupedSourceStats,
    config: &TTAConfig,
) -> Result<(ToyModel, TTAReport)> {
    if config.mode != Mode::Online {
        return Err(CafeError::invalid("adapt_online requires mode = online"));
    }
    run_adaptation(model, target_inputs, target_labels, stats, config)
}

fn preflight_hint(group: usize, size: usize, batch: usize) -> CafeError {
    CafeError::DegenerateBatch {
        group,
        hint: format!(
            "group size {size} >= batch size {batch}: the batch covariance of this group cannot \
             be positive definite; increase the batch size or raise the group count k so that \
             every group is smaller than the batch (k > d/B)"
        ),
    }
}

fn run_adaptation(
    model: &ToyModel,
    target_inputs: &DMatrix<f64>,
    target_labels: Option<&[u32]>,
    stats: &GroupedSourceStats,
    config: &TTAConfig,
) -> Result<(ToyModel, TTAReport)> {
    let started = Instant::now();
    config.validate()?;
    if stats.dim() != model.feature_dim() {
        return Err(CafeError::invalid(format!(
            "statistics cover {} feature dimensions but the model emits {}",
            stats.dim(),
            model.feature_dim()
        )));
    }
    if config.k != stats.k() {
        return Err(CafeError::invalid(format!(
            "config k={} does not match the {} groups frozen in the statistics artifact; \
             regenerate the statistics to change k",
            config.k,
            stats.k()
        )));
    }
    let n = target_inputs.nrows();
    if n == 0 {
        return Err(CafeError::invalid("target set is empty"));
    }
    if let Some(labels) = target_labels {
        if labels.len() != n {
            return Err(CafeError::invalid("label count does not match target rows"));
        }
    }

    // the clipping floor can only be raised after the fact; the spectrum
    // below the stored floor is not recoverable
    let stats = stats.reclip(config.epsilon)?;
    let online = config.mode == Mode::Online;
    let group_floor = max_group_size(stats.partition());
    if config.use_align {
        if let Some(group) = stats
            .partition()
            .groups()
            .iter()
            .position(|g| g.len() >= config.batch_size)
        {
            return Err(preflight_hint(
                group,
                stats.partition().groups()[group].len(),
                config.batch_size,
            ));
        }
    }

    let mut adapted = model.clone();
    let mut opt = MomentumState::new(&adapted, config.lr, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TTAReport {
        config: config.clone(),
        loss_align: Vec::new(),
        loss_infomax: Vec::new(),
        loss_total: Vec::new(),
        per_group_kl_ts: Vec::new(),
        per_group_kl_st: Vec::new(),
        running_accuracy: Vec::new(),
        accuracy: None,
        frechet_before: None,
        frechet_after: None,
        degeneracy_events: Vec::new(),
        batches_consumed: 0,
        wall_time_secs: 0.0,
    };
    let mut online_seen = 0usize;
    let mut online_correct = 0usize;

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < config.batch_size {
                // trailing partial batch: offline drops anything too small
                // for stable group covariances; online only drops it when
                // the alignment loss would reject it anyway
                let drop = if online {
                    config.use_align && chunk.len() < group_floor + 1
                } else {
                    chunk.len() < group_floor + 1
                };
                if drop {
                    continue;
                }
            }
            let batch = select_rows(target_inputs, chunk);
            let (features, logits) = adapted.forward(&batch)?;
            if features.iter().any(|v| !v.is_finite()) || logits.iter().any(|v| !v.is_finite()) {
                return Err(CafeError::numerical(
                    "features diverged to non-finite values during adaptation",
                ));
            }

            let mut loss_a = 0.0;
            let mut grad_features = DMatrix::zeros(features.nrows(), features.ncols());
            if config.use_align {
                let result = feature_alignment_loss(&features, &stats)?;
                loss_a = result.loss;
                grad_features = result.grad_features;
                report.per_group_kl_ts.push(result.per_group_kl_ts);
                report.per_group_kl_st.push(result.per_group_kl_st);
            }

            let mut loss_im = 0.0;
            let mut grad_logits = DMatrix::zeros(logits.nrows(), logits.ncols());
            if config.use_infomax {
                let batch_preds = PredictionBatch::from_logits(logits)?;
                let result = infomax_loss(&batch_preds);
                loss_im = result.loss;
                grad_logits = result.grad_logits;
            }

            let grads = if config.use_align || config.use_infomax {
                adapted.backward(&batch, &grad_features, &grad_logits)?
            } else {
                GradientSet::zeros(&adapted)
            };
            sgd_momentum_step(&mut adapted, &grads, &mut opt)?;

            report.loss_align.push(loss_a);
            report.loss_infomax.push(loss_im);
            report.loss_total.push(loss_a + loss_im);
            report.batches_consumed += 1;

            if online {
                // predict the batch just consumed with the updated model
                let (_, fresh_logits) = adapted.forward(&batch)?;
                let predicted = predict_labels(&fresh_logits);
                if let Some(labels) = target_labels {
                    for (pos, &i) in chunk.iter().enumerate() {
                        if predicted[pos] == labels[i] {
                            online_correct += 1;
                        }
                    }
                    online_seen += chunk.len();
                    report
                        .running_accuracy
                        .push(online_correct as f64 / online_seen as f64);
                }
            }
        }
    }

    // distribution gap against the stored source statistics (block-diagonal
    // covariance reconstruction — the full source covariance does not travel)
    let (src_mean, src_cov) = stats.reconstruct_block_stats();
    let source_ref = FeatureStats {
        mean: src_mean,
        cov: src_cov,
        count: 1,
    };
    let (features_before, _) = model.forward(target_inputs)?;
    let (features_after, logits_after) = adapted.forward(target_inputs)?;
    if features_after.iter().all(|v| v.is_finite()) {
        report.frechet_before =
            frechet_distance(&compute_feature_stats(&features_before)?, &source_ref).ok();
        report.frechet_after =
            frechet_distance(&compute_feature_stats(&features_after)?, &source_ref).ok();
    }

    if let Some(labels) = target_labels {
        report.accuracy = if online {
            (online_seen > 0).then(|| online_correct as f64 / online_seen as f64)
        } else {
            Some(accuracy(&predict_labels(&logits_after), labels))
        };
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((adapted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::GroupPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn default_fixture() -> (ToyModel, DMatrix<f64>, GroupedSourceStats) {
        let model = ToyModel::seeded(16, 64, 32, 10, 90).unwrap();
        let source = randn(4096, 16, 91);
        let stats = precompute_source_stats(&model, &source, 32, 1e-5, 92).unwrap();
        (model, source, stats)
    }

    #[test]
    fn step_zero_alignment_loss_is_small_on_matching_target() {
        let (model, _, stats) = default_fixture();
        let target = randn(2048, 16, 93);
        let config = TTAConfig {
            seed: 94,
            ..TTAConfig::defaults(32)
        };
        let (_, report) = adapt_offline(&model, &target, None, &stats, &config).unwrap();
        assert!(
            report.loss_align[0] <= 0.1,
            "step-0 alignment loss {}",
            report.loss_align[0]
        );
    }

    #[test]
    fn noop_config_leaves_model_unchanged() {
        let (model, _, stats) = default_fixture();
        let target = randn(600, 16, 95) + DMatrix::from_element(600, 16, 0.5);
        let labels: Vec<u32> = (0..600).map(|i| (i % 10) as u32).collect();
        let config = TTAConfig {
            use_align: false,
            use_infomax: false,
            batch_size: 128,
            seed: 96,
            ..TTAConfig::defaults(32)
        };
        let (adapted, report) = adapt_offline(&model, &target, Some(&labels), &stats, &config).unwrap();
        assert_eq!(adapted, model);
        let (_, logits) = model.forward(&target).unwrap();
        let source_only = accuracy(&predict_labels(&logits), &labels);
        assert_eq!(report.accuracy, Some(source_only));
    }

    #[test]
    fn classifier_is_frozen_through_adaptation() {
        let (model, _, stats) = default_fixture();
        let target = randn(1024, 16, 97) * 1.3;
        let config = TTAConfig {
            batch_size: 128,
            seed: 98,
            epochs: 2,
            ..TTAConfig::defaults(32)
        };
        let (adapted, report) = adapt_offline(&model, &target, None, &stats, &config).unwrap();
        assert_eq!(
            adapted.classifier_weight.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            model.classifier_weight.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            adapted.classifier_bias.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            model.classifier_bias.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // and the extractor did move
        assert_ne!(adapted.extractor[0].weight, model.extractor[0].weight);
        assert_eq!(report.steps(), report.batches_consumed);
    }

    #[test]
    fn offline_adaptation_is_deterministic() {
        let (model, _, stats) = default_fixture();
        let target = randn(512, 16, 99) * 1.2;
        let labels: Vec<u32> = (0..512).map(|i| (i % 10) as u32).collect();
        let config = TTAConfig {
            batch_size: 64,
            seed: 100,
            ..TTAConfig::defaults(32)
        };
        let (m1, mut r1) = adapt_offline(&model, &target, Some(&labels), &stats, &config).unwrap();
        let (m2, mut r2) = adapt_offline(&model, &target, Some(&labels), &stats, &config).unwrap();
        assert_eq!(m1, m2);
        r1.wall_time_secs = 0.0;
        r2.wall_time_secs = 0.0;
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn dimwise_equals_explicit_singleton_partition() {
        let model = ToyModel::seeded(8, 24, 12, 4, 101).unwrap();
        let source = randn(2000, 8, 102);
        let (features, _) = model.forward(&source).unwrap();
        let fstats = compute_feature_stats(&features).unwrap();

        let via_k_equals_d = precompute_source_stats(&model, &source, 12, 1e-5, 103).unwrap();
        let via_singletons =
            build_grouped_stats(&fstats, &GroupPartition::singletons(12), 1e-5).unwrap();

        let target = randn(800, 8, 104) * 1.4 - DMatrix::from_element(800, 8, 0.3);
        let config = TTAConfig {
            batch_size: 50,
            k: 12,
            seed: 105,
            epochs: 4,
            ..TTAConfig::defaults(12)
        };
        let (_, r1) = adapt_offline(&model, &target, None, &via_k_equals_d, &config).unwrap();
        let (_, r2) = adapt_offline(&model, &target, None, &via_singletons, &config).unwrap();
        assert!(r1.steps() >= 50);
        for (a, b) in r1.loss_total.iter().zip(&r2.loss_total) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn preflight_refuses_oversized_groups() {
        let model = ToyModel::seeded(6, 12, 8, 3, 106).unwrap();
        let source = randn(500, 6, 107);
        // single group of all 8 dims, batch of 8 → refused
        let stats = precompute_source_stats(&model, &source, 1, 1e-5, 108).unwrap();
        let config = TTAConfig {
            batch_size: 8,
            k: 1,
            seed: 109,
            ..TTAConfig::defaults(8)
        };
        let target = randn(100, 6, 110);
        let err = adapt_offline(&model, &target, None, &stats, &config).unwrap_err();
        assert!(matches!(err, CafeError::DegenerateBatch { .. }));
        let msg = err.to_string();
        assert!(msg.contains("batch"), "hint missing from: {msg}");

        // same stats pass with a comfortably larger batch
        let config_ok = TTAConfig {
            batch_size: 32,
            ..config
        };
        adapt_offline(&model, &target, None, &stats, &config_ok).unwrap();
    }

    #[test]
    fn mismatched_k_is_rejected() {
        let (model, _, stats) = default_fixture();
        let target = randn(300, 16, 111);
        let config = TTAConfig {
            k: 7,
            ..TTAConfig::defaults(32)
        };
        let err = adapt_offline(&model, &target, None, &stats, &config).unwrap_err();
        assert!(matches!(err, CafeError::InvalidInput(_)));
    }

    #[test]
    fn repeated_batch_loss_is_nonincreasing_after_warmup() {
        let model = ToyModel::seeded(6, 16, 8, 3, 112).unwrap();
        let source = randn(1500, 6, 113);
        let stats = precompute_source_stats(&model, &source, 4, 1e-5, 114).unwrap();
        // one batch per epoch → every step sees the identical sample set
        let target = randn(48, 6, 115) * 1.5 + DMatrix::from_element(48, 6, 0.4);
        let config = TTAConfig {
            batch_size: 48,
            k: 4,
            seed: 116,
            epochs: 100,
            ..TTAConfig::defaults(8)
        };
        let (_, report) = adapt_offline(&model, &target, None, &stats, &config).unwrap();
        assert_eq!(report.steps(), 100);
        for t in 21..report.steps() {
            assert!(
                report.loss_total[t] <= report.loss_total[t - 1] + 1e-9,
                "step {t}: {} > {}",
                report.loss_total[t],
                report.loss_total[t - 1]
            );
        }
    }

    #[test]
    fn online_consumes_each_batch_once_and_noop_matches_source() {
        let (model, _, stats) = default_fixture();
        let target = randn(1000, 16, 117) * 1.1;
        let labels: Vec<u32> = (0..1000).map(|i| ((i * 7) % 10) as u32).collect();
        let config = TTAConfig {
            use_align: false,
            use_infomax: false,
            batch_size: 128,
            mode: Mode::Online,
            seed: 118,
            ..TTAConfig::defaults(32)
        };
        let (adapted, report) =
            adapt_online(&model, &target, Some(&labels), &stats, &config).unwrap();
        // 1000 = 7 full batches of 128 + trailing 104, all consumed (no-op
        // config has alignment off, so the tail is not dropped)
        assert_eq!(report.batches_consumed, 8);
        assert_eq!(report.running_accuracy.len(), 8);
        assert_eq!(adapted, model);
        let (_, logits) = model.forward(&target).unwrap();
        let source_only = accuracy(&predict_labels(&logits), &labels);
        assert_eq!(report.accuracy, Some(source_only));
    }

    #[test]
    fn online_predicts_with_the_updated_model() {
        // lr large enough that pre- and post-update predictions differ:
        // verify the reported running accuracy matches predictions made
        // AFTER each step, not before
        let model = ToyModel::seeded(5, 12, 6, 3, 119).unwrap();
        let source = randn(900, 5, 120);
        let stats = precompute_source_stats(&model, &source, 3, 1e-5, 121).unwrap();
        let target = randn(64, 5, 122) * 2.0 + DMatrix::from_element(64, 5, 1.0);
        let labels: Vec<u32> = (0..64).map(|i| (i % 3) as u32).collect();
        let config = TTAConfig {
            batch_size: 32,
            k: 3,
            lr: 0.05,
            mode: Mode::Online,
            seed: 123,
            ..TTAConfig::defaults(6)
        };
        let (_, report) = adapt_online(&model, &target, Some(&labels), &stats, &config).unwrap();

        // replay the stream by hand with the same permutation
        let mut replay = model.clone();
        let mut opt = MomentumState::new(&replay, config.lr, config.momentum).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(32) {
            let batch = select_rows(&target, chunk);
            let (features, logits) = replay.forward(&batch).unwrap();
            let align = feature_alignment_loss(&features, &stats).unwrap();
            let im = infomax_loss(&PredictionBatch::from_logits(logits).unwrap());
            let grads = replay
                .backward(&batch, &align.grad_features, &im.grad_logits)
                .unwrap();
            sgd_momentum_step(&mut replay, &grads, &mut opt).unwrap();
            let (_, post_logits) = replay.forward(&batch).unwrap();
            let predicted = predict_labels(&post_logits);
            for (pos, &i) in chunk.iter().enumerate() {
                if predicted[pos] == labels[i] {
                    correct += 1;
                }
            }
            seen += chunk.len();
        }
        assert_eq!(
            report.accuracy.unwrap(),
            correct as f64 / seen as f64,
            "online accuracy must reflect post-update predictions"
        );
    }

    #[test]
    fn adaptation_reduces_alignment_loss_under_shift() {
        let (model, _, stats) = default_fixture();
        // mean-shifted and re-scaled target
        let target = randn(2048, 16, 124) * 1.6 + DMatrix::from_element(2048, 16, 0.8);
        let config = TTAConfig {
            batch_size: 256,
            lr: 5e-3,
            seed: 125,
            epochs: 25,
            ..TTAConfig::defaults(32)
        };
        let (_, report) = adapt_offline(&model, &target, None, &stats, &config).unwrap();
        let first = report.loss_align[0];
        let last = *report.loss_align.last().unwrap();
        assert!(
            last < first * 0.5,
            "alignment loss did not drop: {first} → {last}"
        );
        let before = report.frechet_before.unwrap();
        let after = report.frechet_after.unwrap();
        assert!(after < before, "Fréchet {before} → {after}");
    }
}

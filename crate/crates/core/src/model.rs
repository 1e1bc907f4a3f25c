//! Toy differentiable classifier: a small MLP feature extractor followed by
//! a linear classifier. During adaptation only the extractor receives
//! parameter gradients; the classifier stays frozen and contributes to the
//! feature gradient via the chain rule alone.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::Dataset;
use crate::error::{CafeError, Result};
use crate::infomax::softmax_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, pre: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
        }
    }

    fn derivative(&self, pre: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => DMatrix::from_element(pre.nrows(), pre.ncols(), 1.0),
        }
    }
}

/// One extractor layer: y = activation(x Wᵀ + b), weight is out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub extractor: Vec<Layer>,
    pub classifier_weight: DMatrix<f64>,
    pub classifier_bias: DVector<f64>,
}

/// Per-parameter gradients mirroring the extractor layers only.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl GradientSet {
    pub fn zeros(model: &ToyModel) -> Self {
        GradientSet {
            layers: model
                .extractor
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                        DVector::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }
}

impl ToyModel {
    pub fn new(
        extractor: Vec<Layer>,
        classifier_weight: DMatrix<f64>,
        classifier_bias: DVector<f64>,
    ) -> Result<Self> {
        if extractor.is_empty() {
            return Err(CafeError::invalid("extractor needs at least one layer"));
        }
        for (i, layer) in extractor.iter().enumerate() {
            if layer.weight.nrows() != layer.bias.len() {
                return Err(CafeError::invalid(format!(
                    "layer {i}: weight has {} output rows but bias has {} entries",
                    layer.weight.nrows(),
                    layer.bias.len()
                )));
            }
            if i > 0 && layer.weight.ncols() != extractor[i - 1].weight.nrows() {
                return Err(CafeError::invalid(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.weight.ncols(),
                    i - 1,
                    extractor[i - 1].weight.nrows()
                )));
            }
        }
        let d = extractor.last().unwrap().weight.nrows();
        if classifier_weight.ncols() != d {
            return Err(CafeError::invalid(format!(
                "classifier expects {} features but extractor emits {d}",
                classifier_weight.ncols()
            )));
        }
        if classifier_weight.nrows() != classifier_bias.len() || classifier_weight.nrows() == 0 {
            return Err(CafeError::invalid("classifier weight/bias shape mismatch"));
        }
        Ok(ToyModel {
            extractor,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Two-layer MLP with He-style init: in→hidden (ReLU), hidden→d (linear),
    /// plus a d→classes linear classifier. A linear feature layer keeps the
    /// feature covariance generically full-rank.
    pub fn seeded(
        in_dim: usize,
        hidden: usize,
        feature_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || feature_dim == 0 || classes == 0 {
            return Err(CafeError::invalid("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
        };
        let w1 = gaussian(hidden, in_dim, (2.0 / in_dim as f64).sqrt());
        let w2 = gaussian(feature_dim, hidden, (2.0 / hidden as f64).sqrt());
        let cw = gaussian(classes, feature_dim, (1.0 / feature_dim as f64).sqrt());
        ToyModel::new(
            vec![
                Layer {
                    weight: w1,
                    bias: DVector::zeros(hidden),
                    activation: Activation::Relu,
                },
                Layer {
                    weight: w2,
                    bias: DVector::zeros(feature_dim),
                    activation: Activation::Identity,
                },
            ],
            cw,
            DVector::zeros(classes),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.extractor[0].weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.last().unwrap().weight.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.classifier_weight.nrows()
    }

    /// Features g_φ(x) and logits h_ψ(g_φ(x)) for a batch of inputs (rows).
    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let cache = self.forward_cached(inputs)?;
        let features = cache.activations.last().unwrap().clone();
        let logits = self.logits_from_features(&features);
        Ok((features, logits))
    }

    fn logits_from_features(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut logits = features * self.classifier_weight.transpose();
        for mut row in logits.row_iter_mut() {
            row += self.classifier_bias.transpose();
        }
        logits
    }

    fn forward_cached(&self, inputs: &DMatrix<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.in_dim() {
            return Err(CafeError::invalid(format!(
                "input has {} columns but the model expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(CafeError::invalid("non-finite model input"));
        }
        let mut activations = vec![inputs.clone()];
        let mut pre_activations = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            let mut pre = activations.last().unwrap() * layer.weight.transpose();
            for mut row in pre.row_iter_mut() {
                row += layer.bias.transpose();
            }
            activations.push(layer.activation.apply(&pre));
            pre_activations.push(pre);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Extractor parameter gradients given upstream ∂L/∂features and
    /// ∂L/∂logits. The classifier routes its logit gradient into the feature
    /// gradient but receives no parameter gradient of its own.
    pub fn backward(
        &self,
        inputs: &DMatrix<f64>,
        grad_features: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
    ) -> Result<GradientSet> {
        let (grads, _, _) = self.backward_full(inputs, grad_features, grad_logits)?;
        Ok(grads)
    }

    /// As `backward`, additionally returning classifier gradients. Used only
    /// by source pre-training; adaptation goes through `backward`.
    pub(crate) fn backward_full(
        &self,
        inputs: &DMatrix<f64>,
        grad_features: &DMatrix<f64>,
        grad_logits: &DMatrix<f64>,
    ) -> Result<(GradientSet, DMatrix<f64>, DVector<f64>)> {
        let n = inputs.nrows();
        let d = self.feature_dim();
        let c = self.class_count();
        if grad_features.shape() != (n, d) || grad_logits.shape() != (n, c) {
            return Err(CafeError::invalid(format!(
                "upstream gradient shapes {:?}/{:?} do not match batch ({n}×{d}, {n}×{c})",
                grad_features.shape(),
                grad_logits.shape()
            )));
        }
        let cache = self.forward_cached(inputs)?;
        let features = cache.activations.last().unwrap();

        let cls_w_grad = grad_logits.transpose() * features;
        let cls_b_grad = column_sums(grad_logits);

        // total feature gradient = direct + chained through the classifier
        let mut upstream = grad_features + grad_logits * &self.classifier_weight;
        let mut layers = vec![
            (DMatrix::zeros(0, 0), DVector::zeros(0));
            self.extractor.len()
        ];
        for (idx, layer) in self.extractor.iter().enumerate().rev() {
            let delta = upstream.component_mul(&layer.activation.derivative(&cache.pre_activations[idx]));
            let weight_grad = delta.transpose() * &cache.activations[idx];
            let bias_grad = column_sums(&delta);
            upstream = &delta * &layer.weight;
            layers[idx] = (weight_grad, bias_grad);
        }
        Ok((GradientSet { layers }, cls_w_grad, cls_b_grad))
    }
}

struct ForwardCache {
    /// activations[0] is the input batch; activations[i+1] the output of layer i
    activations: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict_labels(logits: &DMatrix<f64>) -> Vec<u32> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

pub fn accuracy(predicted: &[u32], labels: &[u32]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predicted.len() as f64
}

const PRETRAIN_BATCH: usize = 64;

/// Cross-entropy source training with heavy-ball momentum SGD over all
/// parameters (extractor and classifier both train here; the classifier is
/// frozen only later, during adaptation). Deterministic for a fixed seed.
/// Returns the trained model and its final source train accuracy.
pub fn pretrain_source(
    model: &ToyModel,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<(ToyModel, f64)> {
    if data.inputs.ncols() != model.in_dim() {
        return Err(CafeError::invalid("dataset width does not match model input"));
    }
    if data.class_count != model.class_count() {
        return Err(CafeError::invalid("dataset classes do not match model"));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(CafeError::invalid("momentum must lie in [0, 1)"));
    }
    let n = data.inputs.nrows();
    let mut trained = model.clone();
    let mut vel = GradientSet::zeros(model);
    let mut cls_w_vel = DMatrix::zeros(
        model.classifier_weight.nrows(),
        model.classifier_weight.ncols(),
    );
    let mut cls_b_vel = DVector::zeros(model.classifier_bias.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(PRETRAIN_BATCH) {
            let batch = select_rows(&data.inputs, chunk);
            let (features, logits) = trained.forward(&batch)?;
            let probs = softmax_rows(&logits);
            // ∂(mean cross-entropy)/∂logits = (p − onehot)/B
            let b = chunk.len() as f64;
            let mut grad_logits = probs;
            for (row, &i) in chunk.iter().enumerate() {
                grad_logits[(row, data.labels[i] as usize)] -= 1.0;
            }
            grad_logits /= b;
            let zero_feat = DMatrix::zeros(features.nrows(), features.ncols());
            let (grads, cls_w_grad, cls_b_grad) =
                trained.backward_full(&batch, &zero_feat, &grad_logits)?;

            for (idx, (wg, bg)) in grads.layers.iter().enumerate() {
                let (wv, bv) = &mut vel.layers[idx];
                *wv = &*wv * momentum + wg;
                *bv = &*bv * momentum + bg;
                trained.extractor[idx].weight -= &*wv * lr;
                trained.extractor[idx].bias -= &*bv * lr;
            }
            cls_w_vel = cls_w_vel * momentum + cls_w_grad;
            cls_b_vel = cls_b_vel * momentum + cls_b_grad;
            trained.classifier_weight -= &cls_w_vel * lr;
            trained.classifier_bias -= &cls_b_vel * lr;
        }
    }

    let (_, logits) = trained.forward(&data.inputs)?;
    let acc = accuracy(&predict_labels(&logits), &data.labels);
    Ok((trained, acc))
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

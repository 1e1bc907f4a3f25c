//! Covariance-aware feature alignment for test-time adaptation.
//!
//! The pipeline: freeze per-group Gaussian summaries of a source model's
//! features ([`stats`], [`grouping`], [`alignment`]), then adapt the feature
//! extractor on unlabeled target data by descending a symmetric Gaussian
//! KL alignment loss plus an information-maximization term ([`infomax`],
//! [`tta`], [`optim`]). [`bench`] provides a synthetic-shift harness and
//! [`io`] the binary artifact formats.

pub use nalgebra;

pub mod alignment;
pub mod bench;
pub mod error;
pub mod grouping;
pub mod infomax;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod stats;
pub mod tta;

pub use alignment::{
    feature_alignment_loss, AlignmentLossResult, GroupedSourceStats, SourceGroup,
};
pub use bench::{
    apply_shift, frechet_distance, generate_source_dataset, run_benchmark, BenchConfig,
    BenchResult, Dataset, Method, ShiftKind, ShiftSpec,
};
pub use error::{CafeError, Result};
pub use grouping::{correlation_adjacency, spectral_cluster, Adjacency, GroupPartition};
pub use infomax::{infomax_loss, InfomaxResult, PredictionBatch};
pub use io::{
    load_dataset, load_model, load_stats, save_dataset, save_model, save_stats,
};
pub use model::{predict_labels, pretrain_source, Activation, GradientSet, Layer, ToyModel};
pub use optim::{sgd_momentum_step, MomentumState};
pub use stats::{compute_feature_stats, FeatureMatrix, FeatureStats};
pub use tta::{
    adapt_offline, adapt_online, precompute_source_stats, Mode, TTAConfig, TTAReport,
};

//! Diverse outlier sampling (DOS) for out-of-distribution detection.
//!
//! The crate trains a small `(K+1)`-class classifier where the extra output is
//! an absent category for outliers. Each training iteration scores a batch of
//! candidate outliers, clusters their L2-normalized penultimate features with
//! K-means and keeps the most ID-like member of every cluster. Baseline
//! samplers (random, greedy, biased, uniform-over-clusters) share the same
//! loop so they can be compared under identical seeds.
//!
//! Module map:
//!
//! - [`numeric`]: dense matrices, seeded RNG, softmax / logsumexp kernels.
//! - [`model`]: MLP with hand-derived backprop, SGD with momentum, checkpoints.
//! - [`clustering`]: normalized K-means, K-means++ seeding, Calinski-Harabasz.
//! - [`scoring`]: OOD scores and training losses with logit gradients.
//! - [`sampling`]: outlier selection strategies and the diversity measure.
//! - [`data`]: toy Gaussian benchmark, embedding files, candidate batching.
//! - [`eval`]: thresholding, FPR95, AUROC, accuracy, report export.
//! - [`harness`]: experiment config, training loop, comparisons, histograms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod sampling;
pub mod scoring;

pub use clustering::{
    assign_to_nearest, calinski_harabasz, kmeans, kmeans_normalized, kmeans_plusplus_seed,
    ClusterAssignment, KMeansParams,
};
pub use data::{EmbeddingDataset, LabeledBatch, Split, ToyBenchmark, ToyConfig};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use harness::{ExperimentConfig, FeatureMode, LossKind, RunArtifacts, Strategy};
pub use model::{Checkpoint, MlpModel, SgdState};
pub use numeric::{Matrix, Rng};
pub use sampling::{CandidateBatch, SelectedOutliers};
pub use scoring::{LossValue, ScoreKind};

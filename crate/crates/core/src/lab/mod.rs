//! Offline analysis: example selection, learning curves, curve fits,
//! code saturation, cluster extrapolation and random baselines.

mod experiments;
mod fit;
mod sampling;
mod split;
mod stats;

pub use experiments::{
    evaluate, extrapolation_analysis, learning_curve, random_baseline, BaselineReport, Dataset, Evaluation,
    ExperimentContext, ExtrapolationPoint, ExtrapolationResult, LearningCurvePoint,
};
pub use fit::{fit_exp_curve, ExpFitParams};
pub use sampling::{balanced_counts, chronological_examples, sample_balanced, trial_seed, ExampleCandidate};
pub use split::{DataSplit, SplitError};
pub use stats::{new_code_fraction, pearson, CodeApplication, DEFAULT_BINS};

use thiserror::Error;

use crate::cluster::ClusterError;
use crate::coder::CoderError;
use crate::embedding::EmbeddingError;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("need {needed} examples but only {available} are available")]
    InsufficientExamples { needed: usize, available: usize },
    #[error("no annotated texts are left to evaluate on")]
    EmptyEvaluation,
    #[error("coding log is empty")]
    EmptyLog,
    #[error("{codes} distinct codes cannot form {k} clusters")]
    TooFewClusters { codes: usize, k: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points must have distinct n")]
    DuplicateAbscissa,
    #[error("points must be finite")]
    NonFinite,
    #[error("unknown text {0:?}")]
    UnknownText(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

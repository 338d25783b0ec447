//! Datasets, splits, training runs and evaluation statistics.

mod config;
mod dataset;
mod metrics;
mod optim;
mod split;
mod train;

pub use config::{
    prepare_experiment, run_experiment, ContextSpec, ExperimentConfig, ExperimentOutcome,
    ModelSize, ModelSpec, PreparedExperiment,
};
pub use dataset::{
    attach_contexts, load_dataset, parse_dataset, Dataset, LabelScheme, StanceInstance,
};
pub use metrics::{
    aggregate_seeds, bhapkar_test, f1_macro, BhapkarResult, F1Report, SeedAggregate,
};
pub use optim::{linear_schedule, AdamW};
pub use split::{
    auto_partition, cross_target_split, in_target_split, Split, SplitIndices, SplitMode, SplitSpec,
};
pub use train::{
    evaluate, train, EpochMetrics, Fingerprint, Prediction, RunResult, TrainConfig, TrainSetup,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::encoder::ModelError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("target {0:?} is missing from the split partition")]
    UnpartitionedTarget(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss at step {step} (lr {lr:e}, batch {batch_ids:?}): {detail}")]
    NonFinite {
        step: usize,
        lr: f64,
        batch_ids: Vec<String>,
        detail: String,
    },
    #[error("covariance matrix is singular (marginal homogeneity test degenerate); paired table {table:?}")]
    Singular { table: Vec<Vec<usize>> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

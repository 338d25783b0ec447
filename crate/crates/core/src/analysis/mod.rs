//! Token attribution from attention norms, token relevance by log-odds,
//! and reports that correlate the two.

mod attribution;
pub mod plot;
mod relevance;
mod report;

pub use attribution::{
    attention_norm_attribution, head_value_norms, norm_attribution, AttentionKind,
    AttributionRecord,
};
pub use relevance::{
    log_odds_ratio, pearson_correlation, token_property_relevance, Cells, RelevanceTable,
    DEFAULT_MIN_COUNT, DEFAULT_SMOOTHING,
};
pub use report::{
    attribution_report, correlate, AttributionReport, AttributionRow, AttributionSummary,
    CorrelationEntry, CorrelationMode, ReportModel, ReportOptions,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::encoder::ModelError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Contract(String),
    #[error("property `{0}` takes a single value; the log-odds ratio needs at least two")]
    SingleValuedProperty(String),
    #[error("correlation undefined: a vector has zero variance")]
    UndefinedCorrelation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

impl AnalysisError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

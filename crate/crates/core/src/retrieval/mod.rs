//! Context retrieval: concept-graph edges, embedding-ranked causal
//! relations, and prompted generation.

mod cache;
mod causal;
mod embed;
mod generate;
mod graph;
mod prompt;

pub use cache::{
    context_length_stats, read_context_cache, write_context_cache, ContextRecord, LengthStat,
    ScoredText,
};
pub use causal::{causal_retrieve, CausalRelation, CausalRetrieval, CausalStore, MODAL_VERBS};
pub use embed::{cosine_similarity, EmbeddingBackend, EncoderEmbedding, HashEmbedding};
pub use generate::{
    generate_context, GenerationBackend, GenerationCache, GenerationOutcome, HttpBackend,
    PromptFailure, ReplayBackend,
};
pub use graph::{conceptgraph_retrieve, ConceptGraph, Edge, GraphLoadStats, PATH_JOINER};
pub use prompt::{
    build_prompts, extract_noun_phrases, postprocess_candidates, Chunker, GenerationConfig,
    PromptMode, PromptTemplate, StopwordChunker, SPECIAL_TOKENS,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
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
    #[error("embedding backend `{backend}`: {message}")]
    Embedding { backend: String, message: String },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("no replayed generation for prompt {0:?}")]
    ReplayMiss(String),
    #[error("generation backend `{backend}`: {message}")]
    Generation { backend: String, message: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

impl RetrievalError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    ConceptGraph,
    Causal,
    Prompt,
}

impl ContextSource {
    pub fn name(self) -> &'static str {
        match self {
            ContextSource::ConceptGraph => "concept_graph",
            ContextSource::Causal => "causal",
            ContextSource::Prompt => "prompt",
        }
    }
}

impl std::str::FromStr for ContextSource {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept_graph" | "conceptnet" => Ok(Self::ConceptGraph),
            "causal" | "causenet" => Ok(Self::Causal),
            "prompt" | "t0pp" => Ok(Self::Prompt),
            other => Err(RetrievalError::Contract(format!(
                "unknown context source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextCandidate {
    pub text: String,
    pub score: f64,
    pub source: ContextSource,
    /// Edge path, relation index or prompt that produced the text.
    pub provenance: String,
}

/// Descending score, then ascending text.
pub(crate) fn rank_candidates(candidates: &mut [ContextCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.text.cmp(&b.text))
    });
}

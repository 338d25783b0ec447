//! Lowercasing subword tokenizer, pair encoding and the stopword resource.

mod stopwords;
mod tokenize;
mod vocab;

pub use stopwords::StopwordList;
pub use tokenize::{encode_pair, normalize, surface_text, tokenize, words, TokenSequence};
pub use vocab::{Vocabulary, CLS, CONTINUATION_PREFIX, PAD, SEP, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("input text is empty after normalization")]
    EmptyInput,
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("stopword list `{0}` is empty")]
    EmptyStopwords(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

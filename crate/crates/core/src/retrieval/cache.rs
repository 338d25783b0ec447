use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContextCandidate, ContextSource, Result, RetrievalError};
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub score: f64,
}

impl From<&ContextCandidate> for ScoredText {
    fn from(c: &ContextCandidate) -> Self {
        Self {
            text: c.text.clone(),
            score: c.score,
        }
    }
}

/// One line of a context cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub id: String,
    pub source: ContextSource,
    pub candidates: Vec<ScoredText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

pub fn write_context_cache(path: impl AsRef<Path>, records: &[ContextRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| RetrievalError::Contract(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out).map_err(|e| RetrievalError::io(path, e))
}

pub fn read_context_cache(path: impl AsRef<Path>) -> Result<Vec<ContextRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RetrievalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStat {
    pub dataset: String,
    pub source: ContextSource,
    pub contexts: usize,
    pub mean_tokens: f64,
}

/// Mean whitespace-token count of the cached context texts per
/// (dataset, source). Records without candidates contribute nothing.
pub fn context_length_stats(records: &[ContextRecord]) -> Vec<LengthStat> {
    let mut acc: BTreeMap<(String, ContextSource), (usize, usize)> = BTreeMap::new();
    for r in records {
        for c in &r.candidates {
            let e = acc
                .entry((r.dataset.clone().unwrap_or_default(), r.source))
                .or_default();
            e.0 += 1;
            e.1 += c.text.split_whitespace().count();
        }
    }
    acc.into_iter()
        .map(|((dataset, source), (n, tokens))| LengthStat {
            dataset,
            source,
            contexts: n,
            mean_tokens: tokens as f64 / n as f64,
        })
        .collect()
}

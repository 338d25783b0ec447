use std::path::Path;

use serde::Serialize;

use super::{
    cosine_similarity, rank_candidates, ContextCandidate, ContextSource, EmbeddingBackend, Result,
    RetrievalError,
};

pub const MODAL_VERBS: [&str; 9] = [
    "must", "shall", "will", "should", "would", "can", "could", "may", "might",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalRelation {
    pub cause: String,
    pub effect: String,
    pub sentence: String,
}

/// Filtered relations with one embedding per sentence.
#[derive(Debug, Clone)]
pub struct CausalStore {
    relations: Vec<CausalRelation>,
    embeddings: Vec<Vec<f64>>,
    backend: String,
    /// Lines rejected by the concept filters.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalRetrieval {
    pub candidates: Vec<ContextCandidate>,
    /// `k` exceeded the store size and every relation was returned.
    pub k_exceeded: bool,
}

/// At least three characters and not a modal verb.
pub fn keep_concept(concept: &str) -> bool {
    let c = concept.trim().to_lowercase();
    c.chars().count() >= 3 && !MODAL_VERBS.contains(&c.as_str())
}

impl CausalStore {
    pub fn load(path: impl AsRef<Path>, backend: &dyn EmbeddingBackend) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
        Self::parse(&text, path, backend)
    }

    /// One relation per line: `cause<TAB>effect<TAB>sentence`.
    pub fn parse(text: &str, path: &Path, backend: &dyn EmbeddingBackend) -> Result<Self> {
        let mut relations = Vec::new();
        let mut dropped = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields[2].trim().is_empty() {
                return Err(RetrievalError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected cause, effect and a non-empty sentence separated by tabs"
                        .into(),
                });
            }
            if !(keep_concept(fields[0]) && keep_concept(fields[1])) {
                dropped += 1;
                continue;
            }
            relations.push(CausalRelation {
                cause: fields[0].trim().to_lowercase(),
                effect: fields[1].trim().to_lowercase(),
                sentence: fields[2].trim().to_string(),
            });
        }
        let sentences: Vec<&str> = relations.iter().map(|r| r.sentence.as_str()).collect();
        let embeddings = backend.embed(&sentences)?;
        if embeddings.len() != relations.len() {
            return Err(RetrievalError::Embedding {
                backend: backend.name().to_string(),
                message: format!(
                    "{} embeddings for {} relations",
                    embeddings.len(),
                    relations.len()
                ),
            });
        }
        Ok(Self {
            relations,
            embeddings,
            backend: backend.name().to_string(),
            dropped,
        })
    }

    pub fn relations(&self) -> &[CausalRelation] {
        &self.relations
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

pub fn causal_retrieve(
    text: &str,
    store: &CausalStore,
    backend: &dyn EmbeddingBackend,
    k: usize,
) -> Result<CausalRetrieval> {
    if store.is_empty() {
        return Err(RetrievalError::Contract("causal store is empty".into()));
    }
    if backend.name() != store.backend {
        return Err(RetrievalError::Contract(format!(
            "store embedded with `{}`, query backend is `{}`",
            store.backend,
            backend.name()
        )));
    }
    let query = backend.embed(&[text])?.remove(0);
    let mut candidates = store
        .relations
        .iter()
        .zip(&store.embeddings)
        .enumerate()
        .map(|(i, (r, e))| {
            Ok(ContextCandidate {
                text: r.sentence.clone(),
                score: cosine_similarity(&query, e)?,
                source: ContextSource::Causal,
                provenance: format!("relation {i}: {} -> {}", r.cause, r.effect),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank_candidates(&mut candidates);
    let k_exceeded = k > candidates.len();
    candidates.truncate(k);
    Ok(CausalRetrieval {
        candidates,
        k_exceeded,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::retrieval::HashEmbedding;

    const FIXTURE: &str = "smoking\tcancer\tsmoking causes cancer
can\tdamage\tcan causes damage
flu\tfever\tthe flu causes fever
tv\tviolence\ttv causes violence
heavy rain\tflooding\theavy rain causes flooding
";

    #[test]
    fn filters_match_hand_application() {
        let store = CausalStore::parse(FIXTURE, Path::new("f"), &HashEmbedding::default()).unwrap();
        let causes: Vec<_> = store.relations().iter().map(|r| r.cause.as_str()).collect();
        assert_eq!(causes, ["smoking", "flu", "heavy rain"]);
        assert_eq!(store.dropped, 2);
        assert_eq!(store.embeddings().len(), store.len());
        assert!(store
            .relations()
            .iter()
            .all(|r| keep_concept(&r.cause) && keep_concept(&r.effect)));
    }

    #[test]
    fn self_query_ranks_first() {
        let b = HashEmbedding::default();
        let store = CausalStore::parse(FIXTURE, Path::new("f"), &b).unwrap();
        let got = causal_retrieve("the flu causes fever", &store, &b, 2).unwrap();
        assert_eq!(got.candidates[0].text, "the flu causes fever");
        assert!((got.candidates[0].score - 1.0).abs() < 1e-9);
        assert!(!got.k_exceeded);
        let all = causal_retrieve("x", &store, &b, 10).unwrap();
        assert!(all.k_exceeded);
        assert_eq!(all.candidates.len(), 3);
    }

    /// Fixed vectors looked up by text.
    struct Table(Vec<(String, Vec<f64>)>);

    impl EmbeddingBackend for Table {
        fn name(&self) -> &str {
            "table"
        }
        fn dim(&self) -> usize {
            self.0[0].1.len()
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
            texts
                .iter()
                .map(|t| {
                    self.0
                        .iter()
                        .find(|(k, _)| k == t)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| RetrievalError::Embedding {
                            backend: "table".into(),
                            message: format!("no vector for {t}"),
                        })
                })
                .collect()
        }
    }

    #[test]
    fn orthogonal_scores_zero() {
        let b = Table(vec![
            ("query".into(), vec![1.0, 0.0]),
            ("cats cause joy".into(), vec![0.0, 1.0]),
        ]);
        let store = CausalStore::parse("cats\tjoy\tcats cause joy\n", Path::new("f"), &b).unwrap();
        let got = causal_retrieve("query", &store, &b, 1).unwrap();
        assert_eq!(got.candidates[0].score, 0.0);
    }

    #[test]
    fn backend_failure_is_load_error() {
        let b = Table(vec![("other".into(), vec![1.0])]);
        assert!(matches!(
            CausalStore::parse(FIXTURE, Path::new("f"), &b),
            Err(RetrievalError::Embedding { .. })
        ));
    }

    #[test]
    fn random_vectors_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 8;
            let mut table = Vec::new();
            let mut lines = String::new();
            for i in 0..n {
                let s = format!("cause{i} leads to effect{trial}");
                table.push((
                    s.clone(),
                    (0..5)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<f64>>(),
                ));
                lines.push_str(&format!("cause{i}\teffect\t{s}\n"));
            }
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            table.push(("q".into(), q.clone()));
            let b = Table(table.clone());
            let store = CausalStore::parse(&lines, Path::new("f"), &b).unwrap();
            let got: Vec<_> = causal_retrieve("q", &store, &b, 3)
                .unwrap()
                .candidates
                .into_iter()
                .map(|c| c.text)
                .collect();
            let mut oracle: Vec<(f64, String)> = table[..n]
                .iter()
                .map(|(s, v)| (cosine_similarity(&q, v).unwrap(), s.clone()))
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let want: Vec<_> = oracle.into_iter().take(3).map(|(_, s)| s).collect();
            assert_eq!(got, want);
        }
    }
}

use std::path::Path;

use super::{Result, RetrievalError};
use crate::encoder::{load_named_tensors_file, EncodedBatch, Encoder, EncoderConfig, Graph};
use crate::tensor::ParamStore;
use crate::text::{encode_pair, words, Vocabulary};

/// Maps texts to unit-norm vectors of a fixed dimension.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(RetrievalError::Dimension(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn unit(mut v: Vec<f64>, backend: &str, text: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::Embedding {
            backend: backend.to_string(),
            message: format!("zero embedding for {text:?}"),
        });
    }
    v.iter_mut().for_each(|a| *a /= norm);
    Ok(v)
}

/// Signed feature hashing of lowercased words (FNV-1a, 64 bit).
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    dim: usize,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn fnv1a(s: &str) -> u64 {
        s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

impl Default for HashEmbedding {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0; self.dim];
                for w in words(text) {
                    let h = Self::fnv1a(&w);
                    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                unit(v, self.name(), text)
            })
            .collect()
    }
}

/// Mean of the final hidden states over non-padding positions.
#[derive(Debug, Clone)]
pub struct EncoderEmbedding {
    store: ParamStore,
    encoder: Encoder,
    vocab: Vocabulary,
}

impl EncoderEmbedding {
    pub fn new(store: ParamStore, encoder: Encoder, vocab: Vocabulary) -> Self {
        Self {
            store,
            encoder,
            vocab,
        }
    }

    /// Build from converted weights: an archive without prefix, the encoder
    /// configuration as JSON and a vocabulary file.
    pub fn load(weights: &Path, config: &Path, vocab: &Path) -> Result<Self> {
        let fail = |message: String| RetrievalError::Embedding {
            backend: "encoder".into(),
            message,
        };
        let raw = std::fs::read(config).map_err(|e| RetrievalError::io(config, e))?;
        let config: EncoderConfig =
            serde_json::from_slice(&raw).map_err(|e| fail(e.to_string()))?;
        let vocab = Vocabulary::load(vocab).map_err(|e| fail(e.to_string()))?;
        let mut store = ParamStore::new();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let encoder = Encoder::new(&mut store, "", &config, false, &mut rng)
            .map_err(|e| fail(e.to_string()))?;
        let report =
            load_named_tensors_file(&mut store, weights, "").map_err(|e| fail(e.to_string()))?;
        if !report.initialized.is_empty() {
            return Err(fail(format!(
                "weights lack {}",
                report.initialized.join(", ")
            )));
        }
        Ok(Self::new(store, encoder, vocab))
    }
}

impl EmbeddingBackend for EncoderEmbedding {
    fn name(&self) -> &str {
        "encoder"
    }

    fn dim(&self) -> usize {
        self.encoder.config.hidden_size
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let fail = |message: String| RetrievalError::Embedding {
            backend: "encoder".into(),
            message,
        };
        let d = self.dim();
        texts
            .iter()
            .map(|text| {
                let seq = encode_pair(text, None, &self.vocab, self.encoder.config.max_seq_len)
                    .map_err(|e| fail(e.to_string()))?;
                let batch =
                    EncodedBatch::from_sequences([&seq]).map_err(|e| fail(e.to_string()))?;
                let mut g = Graph::eval(&self.store);
                let out = self
                    .encoder
                    .forward(&mut g, &batch)
                    .map_err(|e| fail(e.to_string()))?;
                let hidden = g.tape.value(out.hidden).data();
                let mut v = vec![0.0; d];
                let mut n = 0.0;
                for (pos, keep) in batch.keep.iter().enumerate() {
                    if *keep {
                        n += 1.0;
                        for (a, h) in v.iter_mut().zip(&hidden[pos * d..(pos + 1) * d]) {
                            *a += h;
                        }
                    }
                }
                v.iter_mut().for_each(|a| *a /= n);
                unit(v, self.name(), text)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(RetrievalError::ZeroVector)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 1.0]),
            Err(RetrievalError::Dimension(1, 2))
        ));
    }

    #[test]
    fn hash_embeddings_are_unit_and_deterministic() {
        let b = HashEmbedding::new(64);
        let texts = [
            "smoking causes cancer",
            "Smoking causes cancer!",
            "rain causes floods",
        ];
        let a = b.embed(&texts).unwrap();
        let again = b.embed(&texts).unwrap();
        assert_eq!(a, again);
        for v in &a {
            assert_eq!(v.len(), 64);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        // punctuation adds one hashed feature, so the two are close but not equal
        assert!(cosine_similarity(&a[0], &a[1]).unwrap() > 0.8);
        assert!(b.embed(&[""]).is_err());
    }

    #[test]
    fn encoder_embeddings_are_unit() {
        let vocab = Vocabulary::from_corpus(["smoking causes cancer"]);
        let config = EncoderConfig::toy(vocab.len(), 8);
        let mut store = ParamStore::new();
        let mut rng = rand::SeedableRng::seed_from_u64(1);
        let encoder = Encoder::new(&mut store, "", &config, false, &mut rng).unwrap();
        let b = EncoderEmbedding::new(store, encoder, vocab);
        let v = b.embed(&["smoking causes cancer", "cancer"]).unwrap();
        assert_eq!(v[0].len(), b.dim());
        for x in v {
            assert!((x.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}

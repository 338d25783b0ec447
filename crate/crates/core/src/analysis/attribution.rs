use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::encoder::{AttentionOutput, Graph};
use crate::inject::{encode_instances, Instance, StanceModel};
use crate::tensor::ParamId;
use crate::text::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Input-encoder self-attention.
    #[serde(rename = "self")]
    SelfAttention,
    /// Input tokens attending over context tokens in the inject block.
    #[serde(rename = "cross")]
    Cross,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::Cross => "cross",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfAttention),
            "cross" => Ok(Self::Cross),
            other => Err(AnalysisError::Contract(format!(
                "unknown attention kind {other:?} (self, cross)"
            ))),
        }
    }
}

/// Token scores of one instance. Positions follow the unpadded input
/// encoding, special tokens included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub instance_id: String,
    pub kind: AttentionKind,
    /// 1-based encoder layer.
    pub layer: usize,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    /// True for `[CLS]`/`[SEP]` positions.
    pub special: Vec<bool>,
    /// Segment of each position: 0 for the text, 1 for the second part.
    pub segments: Vec<u8>,
}

/// `norms[h * kv_len + j] = ‖v_j,h · W_O[h·dh .. (h+1)·dh, :]‖`, where
/// `values` is `[kv_len, d]` and `w_o` is `[d, d_out]` (row-major, input
/// dimension first).
pub fn head_value_norms(values: &[f64], w_o: &[f64], kv_len: usize, heads: usize) -> Vec<f64> {
    let d = values.len() / kv_len.max(1);
    let d_out = w_o.len() / d.max(1);
    let dh = d / heads;
    let mut out = vec![0.0; heads * kv_len];
    let mut buf = vec![0.0; d_out];
    for h in 0..heads {
        for j in 0..kv_len {
            buf.iter_mut().for_each(|b| *b = 0.0);
            for k in h * dh..(h + 1) * dh {
                let v = values[j * d + k];
                for (b, w) in buf.iter_mut().zip(&w_o[k * d_out..(k + 1) * d_out]) {
                    *b += v * w;
                }
            }
            out[h * kv_len + j] = buf.iter().map(|b| b * b).sum::<f64>().sqrt();
        }
    }
    out
}

/// `score_i = Σ_h Σ_j α_h,i,j · norms[h, j]` for `weights` laid out
/// `[heads, q_len, kv_len]`. Queries with `keep[i] == false` score 0.
pub fn norm_attribution(
    weights: &[f64],
    norms: &[f64],
    heads: usize,
    q_len: usize,
    kv_len: usize,
    keep: &[bool],
) -> Vec<f64> {
    (0..q_len)
        .map(|i| {
            if !keep[i] {
                return 0.0;
            }
            (0..heads)
                .map(|h| {
                    let row = &weights[(h * q_len + i) * kv_len..(h * q_len + i + 1) * kv_len];
                    row.iter()
                        .zip(&norms[h * kv_len..(h + 1) * kv_len])
                        .map(|(a, n)| a * n)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

struct Traced {
    attention: AttentionOutput,
    w_o: ParamId,
    /// Attention rows per instance (`m` for cross-attention).
    group: usize,
}

fn pick_attention(
    model: &StanceModel,
    out: &crate::inject::ForwardOutput,
    layer: usize,
    kind: AttentionKind,
) -> Result<Traced> {
    let num_layers = model.config.inject.encoder.num_layers;
    if layer < 1 || layer > num_layers {
        return Err(AnalysisError::Contract(format!(
            "layer {layer} outside 1..={num_layers}"
        )));
    }
    let inject_layer = model.config.inject.layer();
    match (kind, &out.inject, &model.inject) {
        (AttentionKind::Cross, Some(state), Some(modules)) if layer == inject_layer => Ok(Traced {
            attention: state.input_cross_attention.clone(),
            w_o: modules.input_block.attention.output.weight,
            group: state.m,
        }),
        (AttentionKind::Cross, ..) => Err(AnalysisError::Contract(format!(
            "cross-attention is only traced at the inject layer of an inject model (asked for layer {layer} of {})",
            model.kind()
        ))),
        (AttentionKind::SelfAttention, state, _) => {
            let w_o = model.input_encoder.layers[layer - 1].attention.attention.output.weight;
            let attention = match state {
                Some(s) if layer == inject_layer => s.input_self_attention.clone(),
                Some(_) if layer > inject_layer => out.input_layers[layer - 2].attention.clone(),
                _ => out.input_layers[layer - 1].attention.clone(),
            };
            Ok(Traced { attention, w_o, group: 1 })
        }
    }
}

/// Norm-based attribution for every instance, in order. `layer` is 1-based.
pub fn attention_norm_attribution(
    model: &StanceModel,
    vocab: &Vocabulary,
    instances: &[(&str, Instance)],
    layer: usize,
    kind: AttentionKind,
    batch_size: usize,
) -> Result<Vec<AttributionRecord>> {
    let heads = model.config.inject.encoder.num_heads;
    let mut records = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch: Vec<Instance> = chunk.iter().map(|(_, i)| *i).collect();
        let encoded = encode_instances(model.kind(), &batch, vocab, &model.config.inject)?;
        let mut g = Graph::eval(&model.store);
        let out = model.forward(&mut g, &encoded)?;
        let traced = pick_attention(model, &out, layer, kind)?;
        let weights = g.tape.value(traced.attention.weights);
        let values = g.tape.value(traced.attention.values);
        let w_o = &model.store.get(traced.w_o).tensor;
        let (rows, q_len, kv_len) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
        let d = values.shape()[2];
        if rows != chunk.len() * traced.group {
            return Err(AnalysisError::Contract(format!(
                "traced attention has {rows} rows for {} instances",
                chunk.len()
            )));
        }
        let wsize = heads * q_len * kv_len;
        for (b, (id, _)) in chunk.iter().enumerate() {
            let keep = &encoded.input.keep[b * q_len..(b + 1) * q_len];
            let mut scores = vec![0.0; q_len];
            for r in b * traced.group..(b + 1) * traced.group {
                let norms = head_value_norms(
                    &values.data()[r * kv_len * d..(r + 1) * kv_len * d],
                    w_o.data(),
                    kv_len,
                    heads,
                );
                let s = norm_attribution(
                    &weights.data()[r * wsize..(r + 1) * wsize],
                    &norms,
                    heads,
                    q_len,
                    kv_len,
                    keep,
                );
                for (acc, v) in scores.iter_mut().zip(s) {
                    *acc += v / traced.group as f64;
                }
            }
            let seq = &encoded.input_sequences[b];
            let n = seq.unpadded_len();
            scores.resize(n, 0.0);
            records.push(AttributionRecord {
                instance_id: id.to_string(),
                kind,
                layer,
                tokens: seq.ids[..n]
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or("[UNK]").to_string())
                    .collect(),
                scores,
                special: seq.ids[..n].iter().map(|&t| vocab.is_special(t)).collect(),
                segments: seq.segment_ids[..n].to_vec(),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::inject::{InjectConfig, ModelConfig, ModelKind};
    use crate::tensor::Tensor;

    #[test]
    fn single_key_is_the_value_norm() {
        // one head, one query, one key: weight 1
        let values = [3.0, 4.0];
        let w_o = [1.0, 0.0, 0.0, 1.0];
        let norms = head_value_norms(&values, &w_o, 1, 1);
        assert_eq!(norm_attribution(&[1.0], &norms, 1, 1, 1, &[true]), [5.0]);
    }

    #[test]
    fn three_token_hand_case() {
        // two heads of width 1; W_O maps head 0 to (1, 0) and head 1 to (0, 2)
        let w_o = [1.0, 0.0, 0.0, 2.0];
        let values = [1.0, 1.0, -2.0, 0.5, 0.0, -3.0];
        let norms = head_value_norms(&values, &w_o, 3, 2);
        assert_eq!(norms, [1.0, 2.0, 0.0, 2.0, 1.0, 6.0]);
        #[rustfmt::skip]
        let alpha = [
            // head 0
            0.5, 0.5, 0.0,
            0.2, 0.3, 0.5,
            1.0, 0.0, 0.0,
            // head 1
            0.0, 0.0, 1.0,
            0.25, 0.25, 0.5,
            0.1, 0.1, 0.8,
        ];
        let got = norm_attribution(&alpha, &norms, 2, 3, 3, &[true, true, false]);
        let want = [0.5 + 1.0 + 6.0, 0.2 + 0.6 + 0.5 + 0.25 + 3.0, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(["school uniforms create school spirit", "bad good idea"])
    }

    fn model(kind: ModelKind, v: &Vocabulary) -> StanceModel {
        let mut enc = EncoderConfig::toy(v.len(), 16);
        enc.ff_size = 32;
        let config = ModelConfig {
            kind,
            inject: InjectConfig::new(enc, 2),
        };
        StanceModel::new(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn insts(contexts: &[String]) -> Vec<(&'static str, Instance<'_>)> {
        vec![
            (
                "a",
                Instance {
                    text: "school uniforms create school spirit",
                    target: "uniforms",
                    contexts,
                },
            ),
            (
                "b",
                Instance {
                    text: "bad idea",
                    target: "uniforms",
                    contexts,
                },
            ),
        ]
    }

    #[test]
    fn records_cover_unpadded_tokens_only() {
        let v = vocab();
        let ctx = vec!["school spirit".to_string()];
        for kind in [ModelKind::Bert, ModelKind::Inject] {
            let m = model(kind, &v);
            let recs = attention_norm_attribution(
                &m,
                &v,
                &insts(&ctx),
                2,
                AttentionKind::SelfAttention,
                4,
            )
            .unwrap();
            assert_eq!(recs[1].tokens.len(), recs[1].scores.len());
            assert_eq!(recs[1].tokens.first().map(String::as_str), Some("[CLS]"));
            assert!(recs[1].tokens.len() < recs[0].tokens.len());
            assert!(recs.iter().flat_map(|r| &r.scores).all(|&s| s > 0.0));
            // batching does not change scores
            let one = attention_norm_attribution(
                &m,
                &v,
                &insts(&ctx)[1..],
                2,
                AttentionKind::SelfAttention,
                1,
            )
            .unwrap();
            for (a, b) in one[0].scores.iter().zip(&recs[1].scores) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_kind_needs_the_inject_layer() {
        let v = vocab();
        let ctx = vec!["school spirit".to_string(), "good idea".to_string()];
        let m = model(ModelKind::Inject, &v);
        let recs =
            attention_norm_attribution(&m, &v, &insts(&ctx), 2, AttentionKind::Cross, 2).unwrap();
        assert!(recs[0].scores.iter().all(|&s| s > 0.0));
        assert!(
            attention_norm_attribution(&m, &v, &insts(&ctx), 1, AttentionKind::Cross, 2).is_err()
        );
        let b = model(ModelKind::BertTarget, &v);
        assert!(
            attention_norm_attribution(&b, &v, &insts(&ctx), 2, AttentionKind::Cross, 2).is_err()
        );
        assert!(attention_norm_attribution(
            &b,
            &v,
            &insts(&ctx),
            3,
            AttentionKind::SelfAttention,
            2
        )
        .is_err());
    }

    #[test]
    fn zero_value_projection_gives_zero() {
        let v = vocab();
        let mut m = model(ModelKind::BertTarget, &v);
        for l in 0..2 {
            let attn = &m.input_encoder.layers[l].attention.attention;
            let (w, b) = (attn.value.weight, attn.value.bias);
            let (ws, bs) = (
                m.store.get(w).tensor.shape().to_vec(),
                m.store.get(b).tensor.shape().to_vec(),
            );
            m.store.assign(w, Tensor::zeros(&ws)).unwrap();
            m.store.assign(b, Tensor::zeros(&bs)).unwrap();
        }
        let recs =
            attention_norm_attribution(&m, &v, &insts(&[]), 2, AttentionKind::SelfAttention, 2)
                .unwrap();
        assert!(recs.iter().flat_map(|r| &r.scores).all(|&s| s == 0.0));
    }
}

use serde::{Deserialize, Serialize};

use super::{InjectConfig, ModelKind};
use crate::encoder::{EncodedBatch, ModelError, Result};
use crate::text::{encode_pair, TokenSequence, Vocabulary};

/// One example as seen by a model.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub text: &'a str,
    pub target: &'a str,
    /// Already selected contexts, at most `m`.
    pub contexts: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub text: String,
    pub score: f64,
}

/// Encoded model input. Context rows are grouped per instance.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub input: EncodedBatch,
    pub contexts: Option<EncodedBatch>,
    /// Unpadded input encodings, kept for mapping tokens back to text.
    pub input_sequences: Vec<TokenSequence>,
}

/// The `m` highest-scoring contexts, best first; ties keep input order.
pub fn select_contexts(candidates: &[RankedContext], m: usize) -> Vec<String> {
    let mut order: Vec<&RankedContext> = candidates.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    order.into_iter().take(m).map(|c| c.text.clone()).collect()
}

/// `[SEP]` followed by padding: the stand-in for a missing context.
pub fn separator_only(vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut seq = TokenSequence {
        ids: vec![vocab.pad(); max_len],
        segment_ids: vec![0; max_len],
        attention_mask: vec![0; max_len],
        surface_spans: vec![None; max_len],
        truncated: 0,
    };
    seq.ids[0] = vocab.sep();
    seq.attention_mask[0] = 1;
    seq
}

fn input_sequence(
    kind: ModelKind,
    inst: &Instance,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    let seq = match kind {
        ModelKind::Bert => encode_pair(inst.text, None, vocab, max_len)?,
        ModelKind::BertTarget | ModelKind::Inject => {
            encode_pair(inst.text, Some(inst.target), vocab, max_len)?
        }
        ModelKind::BertContext => {
            let mut second = inst.target.to_string();
            for c in inst.contexts {
                second.push(' ');
                second.push_str(c);
            }
            encode_pair(inst.text, Some(&second), vocab, max_len)?
        }
    };
    Ok(seq)
}

pub fn encode_instances(
    kind: ModelKind,
    instances: &[Instance],
    vocab: &Vocabulary,
    config: &InjectConfig,
) -> Result<ModelBatch> {
    let max_len = config.encoder.max_seq_len;
    let input_sequences = instances
        .iter()
        .map(|inst| input_sequence(kind, inst, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let input = EncodedBatch::from_sequences(&input_sequences)?;
    let contexts = if kind == ModelKind::Inject {
        let m = config.m;
        let mut seqs = Vec::with_capacity(instances.len() * m);
        for (i, inst) in instances.iter().enumerate() {
            if inst.contexts.len() > m {
                return Err(ModelError::Contract(format!(
                    "instance {i} has {} contexts, model takes m={m}",
                    inst.contexts.len()
                )));
            }
            for c in inst.contexts {
                seqs.push(encode_pair(c, None, vocab, max_len)?);
            }
            for _ in inst.contexts.len()..m {
                seqs.push(separator_only(vocab, max_len));
            }
        }
        Some(EncodedBatch::from_sequences(&seqs)?)
    } else {
        None
    };
    Ok(ModelBatch {
        input,
        contexts,
        input_sequences,
    })
}

use rand_chacha::ChaCha8Rng;

use super::{EncodedBatch, EncoderConfig, Graph, LayerTrace, ModelError, Result};
use crate::tensor::{Mask, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.insert_normal(format!("{name}.weight"), &[input, output], std, rng)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.tape.matmul(x, w)?;
        Ok(g.tape.add_bias(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[size], 1.0))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[size]))?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        Ok(g.tape.layer_norm(x, gain, bias, self.eps)?)
    }
}

/// Attention result plus the intermediates needed for attribution.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Projected output `[batch, q_len, d]`.
    pub out: Var,
    /// Attention probabilities `[batch, heads, q_len, kv_len]`.
    pub weights: Var,
    /// Value projections of the key/value source `[batch, kv_len, d]`.
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub hidden: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.hidden_size;
        let std = config.init_std;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d, d, std, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, std, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, std, rng)?,
            output: Linear::new(store, &format!("{name}.out"), d, d, std, rng)?,
            heads: config.num_heads,
            hidden: d,
        })
    }

    /// Scaled dot-product attention with queries from `q_src` and keys and
    /// values from `kv_src`. `kv_mask` has shape `[batch, 1, 1, kv_len]`.
    /// Self-attention is the case `q_src == kv_src`.
    pub fn forward(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        kv_mask: &Mask,
    ) -> Result<AttentionOutput> {
        let qs = g.tape.shape(q_src).to_vec();
        let ks = g.tape.shape(kv_src).to_vec();
        if qs.len() != 3
            || ks.len() != 3
            || qs[0] != ks[0]
            || qs[2] != self.hidden
            || ks[2] != self.hidden
        {
            return Err(ModelError::Tensor(crate::tensor::TensorError::Shape {
                op: "attention",
                left: qs,
                right: ks,
            }));
        }
        let (b, q_len, kv_len) = (qs[0], qs[1], ks[1]);
        if kv_mask.shape() != [b, 1, 1, kv_len] {
            return Err(ModelError::Tensor(crate::tensor::TensorError::Shape {
                op: "attention mask",
                left: vec![b, 1, 1, kv_len],
                right: kv_mask.shape().to_vec(),
            }));
        }
        let (h, dh) = (self.heads, self.hidden / self.heads);

        let q = self.query.forward(g, q_src)?;
        let q = g.tape.reshape(q, &[b, q_len, h, dh])?;
        let q = g.tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(g, kv_src)?;
        let k = g.tape.reshape(k, &[b, kv_len, h, dh])?;
        let k = g.tape.permute(k, &[0, 2, 3, 1])?;
        let values = self.value.forward(g, kv_src)?;
        let v = g.tape.reshape(values, &[b, kv_len, h, dh])?;
        let v = g.tape.permute(v, &[0, 2, 1, 3])?;

        let scores = g.tape.matmul(q, k)?;
        let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.tape.softmax_lastdim(scores, Some(kv_mask))?;
        let ctx = g.tape.matmul(weights, v)?;
        let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.tape.reshape(ctx, &[b, q_len, self.hidden])?;
        let out = self.output.forward(g, ctx)?;
        Ok(AttentionOutput {
            out,
            weights,
            values,
        })
    }
}

/// `norm(residual + dropout(attention(q_src, kv_src)))`.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AttentionSublayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, name, config, rng)?,
            norm: LayerNorm::new(
                store,
                &format!("{name}.norm"),
                config.hidden_size,
                config.layer_norm_eps,
            )?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        kv_mask: &Mask,
    ) -> Result<(Var, AttentionOutput)> {
        let att = self.attention.forward(g, q_src, kv_src, kv_mask)?;
        let hidden = self.residual(g, q_src, att.out)?;
        Ok((hidden, att))
    }

    /// The residual-and-norm half on its own, for callers that combine
    /// several attention outputs first.
    pub fn residual(&self, g: &mut Graph, residual: Var, attention_out: Var) -> Result<Var> {
        let dropped = g.dropout(attention_out)?;
        let sum = g.tape.add(residual, dropped)?;
        self.norm.forward(g, sum)
    }
}

/// `norm(x + dropout(down(gelu(up(x)))))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d, ff, std) = (config.hidden_size, config.ff_size, config.init_std);
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, ff, std, rng)?,
            down: Linear::new(store, &format!("{name}.down"), ff, d, std, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, config.layer_norm_eps)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = self.down.forward(g, h)?;
        let h = g.dropout(h)?;
        let sum = g.tape.add(x, h)?;
        self.norm.forward(g, sum)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: AttentionSublayer,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionSublayer::new(store, &format!("{name}.attn"), config, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), config, rng)?,
        })
    }

    /// Self-attention sublayer only; returns `self_attn_out` and the attention.
    pub fn self_attention(
        &self,
        g: &mut Graph,
        hidden: Var,
        mask: &Mask,
    ) -> Result<(Var, AttentionOutput)> {
        self.attention.forward(g, hidden, hidden, mask)
    }

    pub fn forward(&self, g: &mut Graph, hidden: Var, mask: &Mask) -> Result<LayerTrace> {
        let (self_attn_out, attention) = self.self_attention(g, hidden, mask)?;
        let hidden = self.ffn.forward(g, self_attn_out)?;
        Ok(LayerTrace {
            hidden,
            self_attn_out,
            attention,
        })
    }
}

/// Token + position + segment embeddings, summed, normalized, dropped out.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub word: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub norm: LayerNorm,
}

impl Embeddings {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d, std) = (config.hidden_size, config.init_std);
        Ok(Self {
            word: store.insert_normal(format!("{name}.word"), &[config.vocab_size, d], std, rng)?,
            position: store.insert_normal(
                format!("{name}.position"),
                &[config.max_seq_len, d],
                std,
                rng,
            )?,
            segment: store.insert_normal(
                format!("{name}.segment"),
                &[config.type_vocab_size, d],
                std,
                rng,
            )?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, config.layer_norm_eps)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &EncodedBatch,
        config: &EncoderConfig,
    ) -> Result<Var> {
        if batch.seq > config.max_seq_len {
            return Err(ModelError::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, config.max_seq_len
            )));
        }
        let shape = [batch.batch, batch.seq];
        let word = g.param(self.word)?;
        let words = g.tape.embedding(word, &batch.ids, &shape)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = g.param(self.position)?;
        let pos = g.tape.embedding(pos, &positions, &shape)?;
        let seg = g.param(self.segment)?;
        let seg = g.tape.embedding(seg, &batch.segments, &shape)?;
        let sum = g.tape.add(words, pos)?;
        let sum = g.tape.add(sum, seg)?;
        let normed = self.norm.forward(g, sum)?;
        g.dropout(normed)
    }
}

#[derive(Debug, Clone)]
pub struct Pooler {
    pub dense: Linear,
}

impl Pooler {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.hidden_size;
        Ok(Self {
            dense: Linear::new(store, name, d, d, config.init_std, rng)?,
        })
    }

    /// `tanh(hidden[:, 0, :] · W + b)`.
    pub fn forward(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let first = g.tape.select_position(hidden, 0)?;
        let y = self.dense.forward(g, first)?;
        Ok(g.tape.tanh(y)?)
    }
}

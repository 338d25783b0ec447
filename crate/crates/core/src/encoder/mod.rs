//! Post-layer-norm transformer encoder shared by the input and context
//! stacks.
//!
//! Parameter naming, relative to an encoder prefix such as `input_encoder.`:
//!
//! ```text
//! embeddings.{word,position,segment}          [rows, d]
//! embeddings.norm.{gain,bias}                 [d]
//! layer{i}.attn.{q,k,v,out}.{weight,bias}     [d, d], [d]
//! layer{i}.attn.norm.{gain,bias}              [d]
//! layer{i}.ffn.up.{weight,bias}               [d, ff], [ff]
//! layer{i}.ffn.down.{weight,bias}             [ff, d], [d]
//! layer{i}.ffn.norm.{gain,bias}               [d]
//! pooler.{weight,bias}                        [d, d], [d]
//! ```
//!
//! Layers are numbered from 0. Linear weights are stored `[in, out]` and
//! applied as `x · W + b`.

mod checkpoint;
mod layers;

pub use checkpoint::{load_named_tensors, load_named_tensors_file, save_named_tensors, LoadReport};
pub use layers::{
    AttentionOutput, AttentionSublayer, Embeddings, EncoderLayer, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, Pooler,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Mask, ParamId, ParamStore, Tape,
    TensorError, Var,
};
use crate::text::TokenSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter `{name}`: model expects shape {expected:?}, archive has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_type_vocab() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-12
}
fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    /// Base-size geometry (12 layers, 12 heads, hidden 768).
    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_size: 768,
            ff_size: 3072,
            max_seq_len: 512,
            vocab_size,
            type_vocab_size: 2,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// Desk-scale geometry: 2 layers, 2 heads, hidden 32.
    pub fn toy(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 32,
            ff_size: 64,
            max_seq_len,
            vocab_size,
            type_vocab_size: 2,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ff_size", self.ff_size),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("type_vocab_size", self.type_vocab_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(ModelError::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// One forward pass: a tape, lazily bound parameters, and (in training
/// mode) the dropout stream.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'s> Graph<'s> {
    /// Inference: dropout disabled.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout: None,
        }
    }

    pub fn train(store: &'s ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout: Some((rate, rng)),
            ..Self::eval(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).tensor.clone(), true)?;
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) => Ok(self.tape.dropout(x, *rate, rng)?),
            None => Ok(x),
        }
    }

    /// Gradients of every parameter used in this pass, after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Add gradients collected by [`Graph::param_grads`] into the store.
pub fn accumulate_grads(store: &mut ParamStore, grads: Vec<(ParamId, Vec<f64>)>) {
    for (id, g) in grads {
        for (acc, v) in store.get_mut(id).grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
}

/// A batch of token sequences, cut to the longest non-padding length.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub keep: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl EncodedBatch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Self> {
        let seqs: Vec<&TokenSequence> = seqs.into_iter().collect();
        if seqs.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        let seq = seqs
            .iter()
            .map(|s| {
                s.attention_mask
                    .iter()
                    .rposition(|&m| m == 1)
                    .map_or(1, |p| p + 1)
            })
            .max()
            .unwrap_or(1);
        let mut out = Self {
            ids: Vec::with_capacity(seqs.len() * seq),
            segments: Vec::with_capacity(seqs.len() * seq),
            keep: Vec::with_capacity(seqs.len() * seq),
            batch: seqs.len(),
            seq,
        };
        for s in &seqs {
            for i in 0..seq {
                out.ids.push(s.ids.get(i).copied().unwrap_or(0));
                out.segments
                    .push(s.segment_ids.get(i).map_or(0, |&v| v as usize));
                out.keep
                    .push(s.attention_mask.get(i).is_some_and(|&m| m == 1));
            }
        }
        Ok(out)
    }

    /// Key mask `[batch, 1, 1, seq]` for attention scores `[batch, heads, q, seq]`.
    pub fn attention_mask(&self) -> Mask {
        Mask::new(vec![self.batch, 1, 1, self.seq], self.keep.clone())
            .expect("consistent mask shape")
    }

    /// The same mask with every row repeated `times` times in place
    /// (row `r` becomes rows `r*times .. r*times + times`).
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut out = Self {
            ids: Vec::new(),
            segments: Vec::new(),
            keep: Vec::new(),
            batch: self.batch * times,
            seq: self.seq,
        };
        for r in 0..self.batch {
            let range = r * self.seq..(r + 1) * self.seq;
            for _ in 0..times {
                out.ids.extend_from_slice(&self.ids[range.clone()]);
                out.segments
                    .extend_from_slice(&self.segments[range.clone()]);
                out.keep.extend_from_slice(&self.keep[range.clone()]);
            }
        }
        out
    }
}

/// Per-layer records of one encoder pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer output.
    pub hidden: Var,
    /// Output of the self-attention sublayer (after residual and norm).
    pub self_attn_out: Var,
    pub attention: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub pooler: Option<Pooler>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        with_pooler: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::new(store, &format!("{prefix}embeddings"), config, rng)?;
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}layer{i}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let pooler = if with_pooler {
            Some(Pooler::new(store, &format!("{prefix}pooler"), config, rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            embeddings,
            layers,
            pooler,
        })
    }

    pub fn embed(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        self.embeddings.forward(g, batch, &self.config)
    }

    /// Run layers `range` (0-based) starting from `hidden`.
    pub fn run_layers(
        &self,
        g: &mut Graph,
        mut hidden: Var,
        mask: &Mask,
        range: std::ops::Range<usize>,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let mut traces = Vec::with_capacity(range.len());
        for i in range {
            let trace = self.layers[i].forward(g, hidden, mask)?;
            hidden = trace.hidden;
            traces.push(trace);
        }
        Ok((hidden, traces))
    }

    pub fn forward(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<EncoderOutput> {
        let mask = batch.attention_mask();
        let hidden = self.embed(g, batch)?;
        let (hidden, layers) = self.run_layers(g, hidden, &mask, 0..self.layers.len())?;
        Ok(EncoderOutput { hidden, layers })
    }

    /// `tanh(h_first · W + b)`.
    pub fn pool(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let pooler = self
            .pooler
            .as_ref()
            .ok_or_else(|| ModelError::Contract("encoder has no pooler".into()))?;
        pooler.forward(g, hidden)
    }
}

/// Backpropagate the loss built by `build`, store the gradients, then
/// compare them with central differences. Runs without dropout.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::eval(store);
        let loss = build(&mut g)?;
        g.tape.backward(loss)?;
        g.param_grads()
    };
    store.zero_grad();
    accumulate_grads(store, grads);
    finite_diff_check(
        store,
        |s| {
            let mut g = Graph::eval(s);
            let loss = build(&mut g)?;
            Ok(g.tape.value(loss).item()?)
        },
        opts,
    )
}

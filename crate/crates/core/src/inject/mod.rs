//! Stance classifiers: single-encoder baselines and the dual-encoder model
//! that injects context into the input encoder at one layer.
//!
//! Parameter prefixes: `input_encoder.`, `context_encoder.`,
//! `inject_context.`, `inject_input.`, `head.`.

mod checkpoint;
mod encode;
mod gradcheck;

pub use checkpoint::{load_backbone, CheckpointFiles, CONFIG_FILE, VOCAB_FILE, WEIGHTS_FILE};
pub use encode::{
    encode_instances, select_contexts, separator_only, Instance, ModelBatch, RankedContext,
};
pub use gradcheck::{
    model_gradient_check, random_encoded_batch, random_model_batch, RandomBatchSpec,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    AttentionOutput, AttentionSublayer, Encoder, EncoderConfig, FeedForward, Graph, LayerTrace,
    Linear, ModelError, Result,
};
use crate::tensor::{Mask, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Input text only.
    Bert,
    /// Input text paired with the target.
    BertTarget,
    /// Target and retrieved context appended to the second segment.
    BertContext,
    Inject,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Bert,
        ModelKind::BertTarget,
        ModelKind::BertContext,
        ModelKind::Inject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bert => "bert",
            ModelKind::BertTarget => "bert_target",
            ModelKind::BertContext => "bert_context",
            ModelKind::Inject => "inject",
        }
    }

    pub fn uses_context(self) -> bool {
        matches!(self, ModelKind::BertContext | ModelKind::Inject)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_m() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectConfig {
    /// Shared by both encoders; parameters are not shared.
    pub encoder: EncoderConfig,
    /// 1-based layer index; absent means the last layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_layer: Option<usize>,
    /// Context sentences per instance.
    #[serde(default = "default_m")]
    pub m: usize,
    pub num_labels: usize,
}

impl InjectConfig {
    pub fn new(encoder: EncoderConfig, num_labels: usize) -> Self {
        Self {
            encoder,
            inject_layer: None,
            m: default_m(),
            num_labels,
        }
    }

    pub fn layer(&self) -> usize {
        self.inject_layer.unwrap_or(self.encoder.num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let j = self.layer();
        if j < 1 || j > self.encoder.num_layers {
            return Err(ModelError::Config(format!(
                "inject layer {j} outside 1..={}",
                self.encoder.num_layers
            )));
        }
        if self.m < 1 {
            return Err(ModelError::Config("m must be at least 1".into()));
        }
        if self.num_labels < 2 {
            return Err(ModelError::Config("need at least two labels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(flatten)]
    pub inject: InjectConfig,
}

/// Intermediates of the injection layer. Per-context tensors stack the `m`
/// contexts of each instance as consecutive rows: `[batch * m, ..]`.
#[derive(Debug, Clone)]
pub struct DualForwardState {
    pub e_x_s: Var,
    pub e_c_s: Var,
    pub h_c: Var,
    pub e_x_c: Var,
    pub e_x_c_avg: Var,
    pub h_x: Var,
    pub logits: Var,
    /// Input self-attention at the injection layer.
    pub input_self_attention: AttentionOutput,
    /// Context queries over the input.
    pub context_cross_attention: AttentionOutput,
    /// Input queries over each context.
    pub input_cross_attention: AttentionOutput,
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Input-encoder layers that ran a regular forward pass.
    pub input_layers: Vec<LayerTrace>,
    pub inject: Option<DualForwardState>,
}

#[derive(Debug, Clone)]
pub struct InjectModules {
    pub context_encoder: Encoder,
    pub context_block: AttentionSublayer,
    pub input_block: AttentionSublayer,
}

/// A classifier together with its parameters.
#[derive(Debug, Clone)]
pub struct StanceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input_encoder: Encoder,
    pub inject: Option<InjectModules>,
    pub head: Linear,
}

impl StanceModel {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.inject.validate()?;
        let enc = &config.inject.encoder;
        let mut store = ParamStore::new();
        let input_encoder = Encoder::new(&mut store, "input_encoder.", enc, true, rng)?;
        let inject = if config.kind == ModelKind::Inject {
            Some(InjectModules {
                context_encoder: Encoder::new(&mut store, "context_encoder.", enc, false, rng)?,
                context_block: AttentionSublayer::new(&mut store, "inject_context.attn", enc, rng)?,
                input_block: AttentionSublayer::new(&mut store, "inject_input.attn", enc, rng)?,
            })
        } else {
            None
        };
        let head = Linear::new(
            &mut store,
            "head",
            enc.hidden_size,
            config.inject.num_labels,
            enc.init_std,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            input_encoder,
            inject,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn forward(&self, g: &mut Graph, batch: &ModelBatch) -> Result<ForwardOutput> {
        match &self.inject {
            None => {
                let (logits, input_layers) = self.baseline_forward(g, batch)?;
                Ok(ForwardOutput {
                    logits,
                    input_layers,
                    inject: None,
                })
            }
            Some(modules) => self.inject_forward(g, modules, batch),
        }
    }

    fn classify(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let pooled = self.input_encoder.pool(g, hidden)?;
        let pooled = g.dropout(pooled)?;
        self.head.forward(g, pooled)
    }

    /// Encoder, pooler, dropout, linear head.
    pub fn baseline_forward(
        &self,
        g: &mut Graph,
        batch: &ModelBatch,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let out = self.input_encoder.forward(g, &batch.input)?;
        let logits = self.classify(g, out.hidden)?;
        Ok((logits, out.layers))
    }

    fn inject_forward(
        &self,
        g: &mut Graph,
        modules: &InjectModules,
        batch: &ModelBatch,
    ) -> Result<ForwardOutput> {
        let m = self.config.inject.m;
        let contexts = batch
            .contexts
            .as_ref()
            .ok_or_else(|| ModelError::Contract("inject model needs contexts".into()))?;
        if contexts.batch != batch.input.batch * m {
            return Err(ModelError::Contract(format!(
                "expected {} context rows ({} instances × m={m}), got {}",
                batch.input.batch * m,
                batch.input.batch,
                contexts.batch
            )));
        }
        let j = self.config.inject.layer() - 1;
        let num_layers = self.config.inject.encoder.num_layers;
        let input_mask = batch.input.attention_mask();
        let context_mask = contexts.attention_mask();

        let x = self.input_encoder.embed(g, &batch.input)?;
        let (x, mut input_layers) = self.input_encoder.run_layers(g, x, &input_mask, 0..j)?;
        let (e_x_s, input_self_attention) =
            self.input_encoder.layers[j].self_attention(g, x, &input_mask)?;

        let c = modules.context_encoder.embed(g, contexts)?;
        let (c, _) = modules
            .context_encoder
            .run_layers(g, c, &context_mask, 0..j)?;
        let (e_c_s, _) = modules.context_encoder.layers[j].self_attention(g, c, &context_mask)?;

        let rows: Vec<usize> = (0..batch.input.batch)
            .flat_map(|b| std::iter::repeat_n(b, m))
            .collect();
        let e_x_s_rep = g.tape.gather_rows(e_x_s, &rows)?;
        let input_mask_rep = batch.input.repeat_rows(m).attention_mask();

        let (h_c, context_cross_attention) =
            modules.context_inject_block(g, j, e_x_s_rep, e_c_s, &input_mask_rep)?;
        let ffn = &self.input_encoder.layers[j].ffn;
        let block = modules.input_inject_block(g, ffn, h_c, e_x_s, &context_mask, m)?;
        let (h_x, e_x_c, e_x_c_avg, input_cross_attention) = (
            block.h_x,
            block.attention.out,
            block.e_x_c_avg,
            block.attention,
        );

        // Context layers after j would not influence the logits, so they are skipped.
        let (hidden, after) =
            self.input_encoder
                .run_layers(g, h_x, &input_mask, j + 1..num_layers)?;
        input_layers.extend(after);
        let logits = self.classify(g, hidden)?;
        Ok(ForwardOutput {
            logits,
            input_layers,
            inject: Some(DualForwardState {
                e_x_s,
                e_c_s,
                h_c,
                e_x_c,
                e_x_c_avg,
                h_x,
                logits,
                input_self_attention,
                context_cross_attention,
                input_cross_attention,
                m,
            }),
        })
    }

    /// Mean cross-entropy of `labels` under the model.
    pub fn loss(&self, g: &mut Graph, batch: &ModelBatch, labels: &[usize]) -> Result<(Var, Var)> {
        let out = self.forward(g, batch)?;
        let loss = g.tape.cross_entropy(out.logits, labels)?;
        Ok((loss, out.logits))
    }

    /// Argmax labels and softmax probabilities, without dropout.
    pub fn predict(&self, batch: &ModelBatch) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut g = Graph::eval(&self.store);
        let out = self.forward(&mut g, batch)?;
        let logits = g.tape.value(out.logits);
        let k = self.config.inject.num_labels;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
                let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                (best, probs)
            })
            .collect())
    }
}

/// Result of the input-side inject block.
#[derive(Debug, Clone)]
pub struct InputBlockOutput {
    pub h_x: Var,
    pub e_x_c_avg: Var,
    /// Cross-attention of every (instance, context) row.
    pub attention: AttentionOutput,
}

impl InjectModules {
    /// Context queries (`e_c_s`, `[batch * m, Sc, d]`) attend over the input
    /// self-attention output repeated once per context (`[batch * m, Sx, d]`),
    /// then pass through the context encoder's feed-forward block of layer `j`
    /// (0-based).
    pub fn context_inject_block(
        &self,
        g: &mut Graph,
        j: usize,
        e_x_s: Var,
        e_c_s: Var,
        input_mask: &Mask,
    ) -> Result<(Var, AttentionOutput)> {
        let (h, att) = self.context_block.forward(g, e_c_s, e_x_s, input_mask)?;
        let h = self.context_encoder.layers[j].ffn.forward(g, h)?;
        Ok((h, att))
    }

    /// Input queries attend over each context state in `h_c` (`m` consecutive
    /// rows per instance). The `m` raw attention outputs are averaged, added to
    /// `e_x_s`, normalized and fed through `ffn`.
    pub fn input_inject_block(
        &self,
        g: &mut Graph,
        ffn: &FeedForward,
        h_c: Var,
        e_x_s: Var,
        context_mask: &Mask,
        m: usize,
    ) -> Result<InputBlockOutput> {
        if m == 0 {
            return Err(ModelError::Contract(
                "input inject block needs at least one context".into(),
            ));
        }
        let b = g.tape.shape(e_x_s)[0];
        if g.tape.shape(h_c)[0] != b * m {
            return Err(ModelError::Contract(format!(
                "{} context rows for {b} instances with m={m}",
                g.tape.shape(h_c)[0]
            )));
        }
        let rows: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, m)).collect();
        let queries = g.tape.gather_rows(e_x_s, &rows)?;
        let attention = self
            .input_block
            .attention
            .forward(g, queries, h_c, context_mask)?;
        let e_x_c_avg = g.tape.group_mean(attention.out, m)?;
        let h = self.input_block.residual(g, e_x_s, e_x_c_avg)?;
        let h_x = ffn.forward(g, h)?;
        Ok(InputBlockOutput {
            h_x,
            e_x_c_avg,
            attention,
        })
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelBatch, ModelConfig, StanceModel};
use crate::encoder::{check_gradients, EncodedBatch, ModelError, Result};
use crate::tensor::{GradCheckOptions, GradCheckReport};

/// Shape of the random batch fed to [`model_gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomBatchSpec {
    pub batch: usize,
    pub seq: usize,
}

impl Default for RandomBatchSpec {
    fn default() -> Self {
        Self { batch: 1, seq: 6 }
    }
}

/// Random ids and segments with a random-length padded tail per row.
/// The first position of every row is kept.
pub fn random_encoded_batch(
    rows: usize,
    seq: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> EncodedBatch {
    let mut out = EncodedBatch {
        ids: Vec::with_capacity(rows * seq),
        segments: Vec::with_capacity(rows * seq),
        keep: Vec::with_capacity(rows * seq),
        batch: rows,
        seq,
    };
    for _ in 0..rows {
        let len = rng.random_range(1..=seq);
        let split = rng.random_range(0..=len);
        for i in 0..seq {
            out.ids.push(if i < len {
                rng.random_range(0..vocab_size)
            } else {
                0
            });
            out.segments.push(usize::from(i >= split && i < len));
            out.keep.push(i < len);
        }
    }
    out
}

/// A random input batch (and `m` random contexts per row for models that
/// take them) with random labels.
pub fn random_model_batch(
    config: &ModelConfig,
    spec: RandomBatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelBatch, Vec<usize>)> {
    let enc = &config.inject.encoder;
    if spec.batch == 0 || spec.seq == 0 || spec.seq > enc.max_seq_len {
        return Err(ModelError::Config(format!(
            "random batch {}x{} invalid for max_seq_len {}",
            spec.batch, spec.seq, enc.max_seq_len
        )));
    }
    let input = random_encoded_batch(spec.batch, spec.seq, enc.vocab_size, rng);
    let contexts = (config.kind == super::ModelKind::Inject)
        .then(|| random_encoded_batch(spec.batch * config.inject.m, spec.seq, enc.vocab_size, rng));
    let labels = (0..spec.batch)
        .map(|_| rng.random_range(0..config.inject.num_labels))
        .collect();
    Ok((
        ModelBatch {
            input,
            contexts,
            input_sequences: Vec::new(),
        },
        labels,
    ))
}

/// Builds a model from `seed`, draws a random batch from the same stream
/// and compares backpropagated gradients of the loss with central
/// differences over every parameter.
pub fn model_gradient_check(
    config: &ModelConfig,
    spec: RandomBatchSpec,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StanceModel::new(config.clone(), &mut rng)?;
    let (batch, labels) = random_model_batch(config, spec, &mut rng)?;
    let frozen = model.clone();
    check_gradients(
        &mut model.store,
        |g| Ok(frozen.loss(g, &batch, &labels)?.0),
        opts,
    )
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{linear_schedule, AdamW};
use super::{f1_macro, Dataset, ExperimentError, Result, SplitIndices, StanceInstance};
use crate::encoder::{accumulate_grads, Graph, ModelError};
use crate::inject::{encode_instances, load_backbone, Instance, ModelConfig, StanceModel};
use crate::tensor::{NamedTensors, ParamStore, RngState, TensorError};
use crate::text::Vocabulary;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM_BASE: u64 = 1 << 32;

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_ratio: 0.2,
            weight_decay: 0.01,
            seeds: default_seeds(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ExperimentError::Contract(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ExperimentError::Contract(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(ExperimentError::Contract(
                "warmup_ratio must lie in [0, 1] and weight_decay be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run needs besides its hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub dataset: &'a Dataset,
    pub splits: &'a SplitIndices,
    pub model: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    /// Encoder weights copied into every encoder before training.
    pub backbone: Option<&'a NamedTensors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
    /// Present for epochs that improved on the best dev score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub rng: String,
}

impl Fingerprint {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            rng: RngState::ALGORITHM.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub labels: Vec<String>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub test_f1: f64,
    /// Test-set predictions of the best epoch.
    pub predictions: Vec<Prediction>,
    pub weight_decay: f64,
    pub fingerprint: Fingerprint,
}

fn as_instance(inst: &StanceInstance) -> Instance<'_> {
    Instance {
        text: &inst.text,
        target: &inst.target,
        contexts: inst.contexts.as_deref().unwrap_or(&[]),
    }
}

/// Predictions for `indices` in order, without dropout.
pub fn evaluate(
    model: &StanceModel,
    vocab: &Vocabulary,
    instances: &[StanceInstance],
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Vec<Instance> = chunk.iter().map(|&i| as_instance(&instances[i])).collect();
        let encoded = encode_instances(model.kind(), &batch, vocab, &model.config.inject)?;
        for (&i, (pred, probs)) in chunk.iter().zip(model.predict(&encoded)?) {
            out.push(Prediction {
                id: instances[i].id.clone(),
                gold: instances[i].label,
                pred,
                probs,
            });
        }
    }
    Ok(out)
}

fn score(predictions: &[Prediction], num_labels: usize) -> Result<f64> {
    let pred: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let gold: Vec<usize> = predictions.iter().map(|p| p.gold).collect();
    Ok(f1_macro(&pred, &gold, num_labels)?.f1_macro)
}

fn non_finite(
    step: usize,
    lr: f64,
    ids: &[usize],
    instances: &[StanceInstance],
    detail: String,
) -> ExperimentError {
    ExperimentError::NonFinite {
        step,
        lr,
        batch_ids: ids.iter().map(|&i| instances[i].id.clone()).collect(),
        detail,
    }
}

/// Fine-tune one model for one seed. Dev F1 is measured after every epoch;
/// the test split is scored whenever dev F1 strictly improves, so ties keep
/// the earlier epoch. Returns the result and the best-epoch model.
pub fn train(
    setup: &TrainSetup,
    config: &TrainConfig,
    seed: u64,
) -> Result<(RunResult, StanceModel)> {
    config.validate()?;
    let TrainSetup {
        dataset,
        splits,
        model: model_config,
        vocab,
        backbone,
    } = *setup;
    let instances = &dataset.instances;
    if model_config.inject.num_labels != dataset.scheme.len() {
        return Err(ExperimentError::Contract(format!(
            "model has {} labels, dataset scheme has {}",
            model_config.inject.num_labels,
            dataset.scheme.len()
        )));
    }
    if splits.train.is_empty() || splits.dev.is_empty() || splits.test.is_empty() {
        return Err(ExperimentError::Contract(
            "train, dev and test splits must all be non-empty".into(),
        ));
    }
    if model_config.kind.uses_context() {
        if let Some(inst) = instances.iter().find(|i| i.contexts.is_none()) {
            return Err(ExperimentError::Contract(format!(
                "{} needs contexts but instance {:?} has none attached",
                model_config.kind, inst.id
            )));
        }
    }

    let rng = RngState::new(seed);
    let mut model = StanceModel::new(model_config.clone(), &mut rng.stream(INIT_STREAM))?;
    if let Some(archive) = backbone {
        load_backbone(&mut model, archive)?;
    }
    let dropout = model_config.inject.encoder.dropout;
    let num_labels = dataset.scheme.len();
    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let steps_per_epoch = splits.train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut shuffle_rng = rng.stream(SHUFFLE_STREAM);
    let mut order = splits.train.clone();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, Vec<Prediction>, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for ids in order.chunks(config.batch_size) {
            step += 1;
            let lr = config.learning_rate * linear_schedule(step, total_steps, config.warmup_ratio);
            let batch: Vec<Instance> = ids.iter().map(|&i| as_instance(&instances[i])).collect();
            let labels: Vec<usize> = ids.iter().map(|&i| instances[i].label).collect();
            let encoded = encode_instances(model.kind(), &batch, vocab, &model.config.inject)?;
            model.store.zero_grad();
            let grads = {
                let mut g = Graph::train(
                    &model.store,
                    dropout,
                    rng.stream(DROPOUT_STREAM_BASE + step as u64),
                );
                let (loss, _) = match model.loss(&mut g, &encoded, &labels) {
                    Ok(v) => v,
                    Err(ModelError::Tensor(e @ TensorError::NonFinite { .. })) => {
                        return Err(non_finite(step, lr, ids, instances, e.to_string()))
                    }
                    Err(e) => return Err(e.into()),
                };
                let value = g.tape.value(loss).item().map_err(ModelError::from)?;
                if !value.is_finite() {
                    return Err(non_finite(
                        step,
                        lr,
                        ids,
                        instances,
                        format!("loss {value}"),
                    ));
                }
                loss_sum += value * ids.len() as f64;
                if let Err(e) = g.tape.backward(loss) {
                    return Err(match e {
                        TensorError::NonFinite { .. } => {
                            non_finite(step, lr, ids, instances, e.to_string())
                        }
                        other => ModelError::from(other).into(),
                    });
                }
                g.param_grads()
            };
            accumulate_grads(&mut model.store, grads);
            optimizer.step(&mut model.store, lr);
        }

        let dev = evaluate(&model, vocab, instances, &splits.dev, config.batch_size)?;
        let dev_f1 = score(&dev, num_labels)?;
        let improved = best.as_ref().is_none_or(|b| dev_f1 > b.1);
        let test_f1 = if improved {
            let test = evaluate(&model, vocab, instances, &splits.test, config.batch_size)?;
            let f1 = score(&test, num_labels)?;
            best = Some((epoch, dev_f1, f1, test, model.store.clone()));
            Some(f1)
        } else {
            None
        };
        let train_loss = loss_sum / splits.train.len() as f64;
        log::info!("seed {seed} epoch {epoch}: loss {train_loss:.4} dev F1 {dev_f1:.4}");
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            dev_f1,
            test_f1,
        });
    }

    let (best_epoch, dev_f1, test_f1, predictions, store) = best.expect("at least one epoch");
    model.store = store;
    let result = RunResult {
        seed,
        model: model_config.clone(),
        train: config.clone(),
        labels: dataset.scheme.labels.clone(),
        epochs,
        best_epoch,
        dev_f1,
        test_f1,
        predictions,
        weight_decay: config.weight_decay,
        fingerprint: Fingerprint::current(),
    };
    Ok((result, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::experiments::LabelScheme;
    use crate::inject::{InjectConfig, ModelKind};

    /// Label 0 texts use one word family, label 1 another.
    fn toy_dataset() -> Dataset {
        let pro = ["good", "great", "fine", "nice", "happy"];
        let con = ["bad", "awful", "poor", "sad", "ugly"];
        let mut instances = Vec::new();
        for i in 0..10 {
            for (label, words) in [(0, &pro), (1, &con)] {
                instances.push(StanceInstance {
                    id: format!("{label}-{i}"),
                    text: format!("{} {}", words[i % 5], words[(i + 2) % 5]),
                    target: "topic".into(),
                    label,
                    contexts: Some(vec![format!("{} thing", words[(i + 1) % 5])]),
                });
            }
        }
        Dataset {
            instances,
            scheme: LabelScheme {
                labels: vec!["pro".into(), "con".into()],
            },
        }
    }

    fn model_config(kind: ModelKind, vocab: &Vocabulary) -> ModelConfig {
        let mut enc = EncoderConfig::toy(vocab.len(), 16);
        enc.ff_size = 32;
        enc.dropout = 0.0;
        ModelConfig {
            kind,
            inject: InjectConfig::new(enc, 2),
        }
    }

    fn all_splits(n: usize) -> SplitIndices {
        let all: Vec<usize> = (0..n).collect();
        SplitIndices {
            train: all.clone(),
            dev: all.clone(),
            test: all,
        }
    }

    fn vocab_for(d: &Dataset) -> Vocabulary {
        Vocabulary::from_corpus(d.instances.iter().flat_map(|i| {
            [i.text.as_str(), i.target.as_str()]
                .into_iter()
                .chain(i.contexts.iter().flatten().map(String::as_str))
        }))
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 3e-3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = toy_dataset();
        let vocab = vocab_for(&d);
        let splits = all_splits(d.instances.len());
        let mc = model_config(ModelKind::BertTarget, &vocab);
        let setup = TrainSetup {
            dataset: &d,
            splits: &splits,
            model: &mc,
            vocab: &vocab,
            backbone: None,
        };
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..fast()
        };
        let (_, trained) = train(&setup, &config, 3).unwrap();
        let fresh =
            StanceModel::new(mc.clone(), &mut RngState::new(3).stream(INIT_STREAM)).unwrap();
        for ((_, a), (_, b)) in trained.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let d = toy_dataset();
        let vocab = vocab_for(&d);
        let splits = all_splits(d.instances.len());
        for kind in [ModelKind::Bert, ModelKind::Inject] {
            let mc = model_config(kind, &vocab);
            let setup = TrainSetup {
                dataset: &d,
                splits: &splits,
                model: &mc,
                vocab: &vocab,
                backbone: None,
            };
            let (result, model) = train(&setup, &fast(), 0).unwrap();
            let preds = evaluate(&model, &vocab, &d.instances, &splits.train, 8).unwrap();
            assert_eq!(
                score(&preds, 2).unwrap(),
                1.0,
                "{kind}: {:?}",
                result.epochs
            );
            assert_eq!(result.predictions.len(), d.instances.len());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let d = toy_dataset();
        let vocab = vocab_for(&d);
        let splits = SplitIndices {
            train: (0..14).collect(),
            dev: (14..17).collect(),
            test: (17..20).collect(),
        };
        let mut mc = model_config(ModelKind::Inject, &vocab);
        mc.inject.encoder.dropout = 0.1;
        let setup = TrainSetup {
            dataset: &d,
            splits: &splits,
            model: &mc,
            vocab: &vocab,
            backbone: None,
        };
        let config = TrainConfig {
            epochs: 2,
            ..fast()
        };
        let (a, ma) = train(&setup, &config, 7).unwrap();
        let (b, mb) = train(&setup, &config, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(ma.store, mb.store);
        let best = a
            .epochs
            .iter()
            .map(|e| e.dev_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(
            a.epochs.iter().position(|e| e.dev_f1 == best).unwrap() + 1,
            a.best_epoch
        );
        let (c, _) = train(&setup, &config, 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn missing_contexts_are_rejected() {
        let mut d = toy_dataset();
        d.instances[3].contexts = None;
        let vocab = vocab_for(&d);
        let splits = all_splits(d.instances.len());
        let mc = model_config(ModelKind::Inject, &vocab);
        let setup = TrainSetup {
            dataset: &d,
            splits: &splits,
            model: &mc,
            vocab: &vocab,
            backbone: None,
        };
        assert!(
            matches!(train(&setup, &fast(), 0), Err(ExperimentError::Contract(m)) if m.contains("1-1"))
        );
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let d = toy_dataset();
        let vocab = vocab_for(&d);
        let splits = all_splits(d.instances.len());
        let mc = model_config(ModelKind::Bert, &vocab);
        let setup = TrainSetup {
            dataset: &d,
            splits: &splits,
            model: &mc,
            vocab: &vocab,
            backbone: None,
        };
        let mut poisoned = crate::tensor::NamedTensors::new();
        let t = crate::tensor::Tensor::full(&[vocab.len(), 32], f64::NAN);
        poisoned.insert(
            "embeddings.word".into(),
            (crate::tensor::ArchiveDtype::F64, t),
        );
        let setup = TrainSetup {
            backbone: Some(&poisoned),
            ..setup
        };
        match train(&setup, &fast(), 0) {
            Err(ExperimentError::NonFinite {
                step, batch_ids, ..
            }) => {
                assert_eq!(step, 1);
                assert_eq!(batch_ids.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::TrainSetup;
use super::{
    aggregate_seeds, attach_contexts, load_dataset, train, Dataset, ExperimentError, Result,
    RunResult, SeedAggregate, SplitIndices, SplitSpec, TrainConfig,
};
use crate::encoder::EncoderConfig;
use crate::inject::{InjectConfig, ModelConfig, ModelKind};
use crate::retrieval::{read_context_cache, ContextSource};
use crate::tensor::read_archive;
use crate::text::Vocabulary;
use crate::util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    #[default]
    Toy,
    Base,
}

fn default_m() -> usize {
    2
}

fn default_max_seq_len() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub size: ModelSize,
    /// Full geometry; overrides `size`. `vocab_size` is taken from the vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_layer: Option<usize>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Encoder weight archive, parameter names without prefix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    /// Word-piece vocabulary; absent means a word vocabulary built from the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

impl ModelSpec {
    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        let encoder = match (&self.encoder, self.size) {
            (Some(e), _) => EncoderConfig {
                vocab_size,
                ..e.clone()
            },
            (None, ModelSize::Toy) => EncoderConfig::toy(vocab_size, self.max_seq_len),
            (None, ModelSize::Base) => EncoderConfig {
                max_seq_len: self.max_seq_len,
                ..EncoderConfig::base(vocab_size)
            },
        };
        ModelConfig {
            kind: self.kind,
            inject: InjectConfig {
                inject_layer: self.inject_layer,
                m: self.m,
                ..InjectConfig::new(encoder, num_labels)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    /// Context cache (JSON Lines) joined to the dataset by id.
    pub cache: PathBuf,
    /// Only use records from this source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ContextSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextSpec>,
}

impl ExperimentConfig {
    /// Parse a JSON config; relative paths are taken from the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.dataset);
        for p in [
            config.model.pretrained.as_mut(),
            config.model.vocab.as_mut(),
            config.context.as_mut().map(|c| &mut c.cache),
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }
}

/// A prepared experiment: data with contexts attached, splits and vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub dataset: Dataset,
    pub splits: SplitIndices,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
}

pub fn prepare_experiment(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    let mut dataset = load_dataset(&config.dataset)?;
    let m = config.model.m;
    match &config.context {
        Some(spec) => {
            let mut records = read_context_cache(&spec.cache)?;
            if let Some(source) = spec.source {
                records.retain(|r| r.source == source);
            }
            let missing = attach_contexts(&mut dataset.instances, &records, m);
            if missing > 0 {
                log::warn!("{missing} instance(s) have no cached context; they get separator-only contexts");
            }
        }
        None if config.model.kind.uses_context() => {
            for inst in &mut dataset.instances {
                match &mut inst.contexts {
                    Some(c) => c.truncate(m),
                    None => {
                        return Err(ExperimentError::Contract(format!(
                            "{} needs contexts: configure a context cache or inline `contexts` (instance {:?})",
                            config.model.kind, inst.id
                        )))
                    }
                }
            }
        }
        None => {}
    }
    let splits = config.split.apply(&dataset.instances)?;
    let vocab = match &config.model.vocab {
        Some(p) => Vocabulary::load(p).map_err(crate::encoder::ModelError::from)?,
        None => Vocabulary::from_corpus(dataset.instances.iter().flat_map(|i| {
            [i.text.as_str(), i.target.as_str()]
                .into_iter()
                .chain(i.contexts.iter().flatten().map(String::as_str))
        })),
    };
    let model = config.model.model_config(vocab.len(), dataset.scheme.len());
    model.inject.validate()?;
    Ok(PreparedExperiment {
        dataset,
        splits,
        vocab,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    /// Test F1-macro over seeds.
    pub test_f1: SeedAggregate,
}

/// Train one model per configured seed. With `out_dir`, each run is written
/// as `run_seed{seed}.json` next to its best checkpoint in `model_seed{seed}/`,
/// and the aggregate as `summary.json`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let prepared = prepare_experiment(config)?;
    let backbone = config
        .model
        .pretrained
        .as_ref()
        .map(read_archive)
        .transpose()
        .map_err(crate::encoder::ModelError::from)?;
    let setup = TrainSetup {
        dataset: &prepared.dataset,
        splits: &prepared.splits,
        model: &prepared.model,
        vocab: &prepared.vocab,
        backbone: backbone.as_ref(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let mut runs = Vec::with_capacity(config.train.seeds.len());
    for &seed in &config.train.seeds {
        let (run, model) = train(&setup, &config.train, seed)?;
        log::info!(
            "seed {seed}: best epoch {} test F1 {:.4}",
            run.best_epoch,
            run.test_f1
        );
        if let Some(dir) = out_dir {
            let file = dir.join(format!("run_seed{seed}.json"));
            write_atomic(&file, &serde_json::to_vec_pretty(&run)?)
                .map_err(|e| ExperimentError::io(&file, e))?;
            model.save(dir.join(format!("model_seed{seed}")), &prepared.vocab)?;
        }
        runs.push(run);
    }
    let scores: Vec<f64> = runs.iter().map(|r| r.test_f1).collect();
    let outcome = ExperimentOutcome {
        config: config.clone(),
        runs,
        test_f1: aggregate_seeds(&scores)?,
    };
    if let Some(dir) = out_dir {
        let file = dir.join("summary.json");
        write_atomic(&file, &serde_json::to_vec_pretty(&outcome)?)
            .map_err(|e| ExperimentError::io(&file, e))?;
    }
    Ok(outcome)
}

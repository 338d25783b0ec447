use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelKind, StanceModel};
use crate::encoder::{load_named_tensors, save_named_tensors, LoadReport, ModelError, Result};
use crate::tensor::{read_archive, write_archive, NamedTensors};
use crate::text::Vocabulary;
use crate::util::write_atomic;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.ntar";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Layout of a checkpoint directory.
#[derive(Debug, Clone)]
pub struct CheckpointFiles {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub vocab: PathBuf,
}

impl CheckpointFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            config: dir.join(CONFIG_FILE),
            weights: dir.join(WEIGHTS_FILE),
            vocab: dir.join(VOCAB_FILE),
        }
    }
}

impl StanceModel {
    pub fn save(&self, dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        let files = CheckpointFiles::in_dir(dir);
        write_archive(&files.weights, &save_named_tensors(&self.store, ""))?;
        write_atomic(&files.config, &serde_json::to_vec_pretty(&self.config)?)?;
        vocab.save(&files.vocab)?;
        Ok(())
    }

    /// Every parameter must be present in the archive.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Vocabulary)> {
        let files = CheckpointFiles::in_dir(dir);
        let config: ModelConfig = serde_json::from_slice(&fs::read(&files.config)?)?;
        let vocab = Vocabulary::load(&files.vocab)?;
        if vocab.len() != config.inject.encoder.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.inject.encoder.vocab_size
            )));
        }
        let mut model = StanceModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let report = load_named_tensors(&mut model.store, &read_archive(&files.weights)?, "")?;
        if !report.initialized.is_empty() {
            return Err(ModelError::Contract(format!(
                "checkpoint lacks parameters: {}",
                report.initialized.join(", ")
            )));
        }
        Ok((model, vocab))
    }
}

/// Copy pretrained encoder weights (names without prefix) into the input
/// encoder and, for the dual model, the context encoder. Inject blocks and
/// the head keep their fresh initialization.
pub fn load_backbone(model: &mut StanceModel, archive: &NamedTensors) -> Result<Vec<LoadReport>> {
    let mut reports = vec![load_named_tensors(
        &mut model.store,
        archive,
        "input_encoder.",
    )?];
    if model.kind() == ModelKind::Inject {
        reports.push(load_named_tensors(
            &mut model.store,
            archive,
            "context_encoder.",
        )?);
    }
    Ok(reports)
}

use std::path::Path;

use serde::Serialize;

use super::{ModelError, Result};
use crate::tensor::{read_archive, ArchiveDtype, NamedTensors, ParamStore};

/// Outcome of assigning archive tensors to model parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// Model parameters that took their value from the archive.
    pub assigned: Vec<String>,
    /// Model parameters under the prefix with no archive entry; they keep
    /// their random initialization.
    pub initialized: Vec<String>,
    /// Archive entries that matched no model parameter.
    pub unused: Vec<String>,
}

/// Every parameter whose name starts with `prefix` is looked up in the
/// archive under its name with `prefix` removed. An empty prefix matches
/// full names, which is how checkpoints are restored.
pub fn load_named_tensors(
    store: &mut ParamStore,
    archive: &NamedTensors,
    prefix: &str,
) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut used = std::collections::BTreeSet::new();
    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    // validate all shapes before touching anything
    for (id, name) in &targets {
        let key = &name[prefix.len()..];
        if let Some((_, t)) = archive.get(key) {
            let expected = store.get(*id).tensor.shape();
            if expected != t.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
    }
    for (id, name) in targets {
        let key = &name[prefix.len()..];
        match archive.get(key) {
            Some((_, t)) => {
                store.assign(id, t.clone())?;
                used.insert(key.to_string());
                report.assigned.push(name);
            }
            None => report.initialized.push(name),
        }
    }
    report.unused = archive
        .keys()
        .filter(|k| !used.contains(*k))
        .cloned()
        .collect();
    Ok(report)
}

pub fn load_named_tensors_file(
    store: &mut ParamStore,
    path: impl AsRef<Path>,
    prefix: &str,
) -> Result<LoadReport> {
    let archive = read_archive(path)?;
    load_named_tensors(store, &archive, prefix)
}

/// All parameters under `prefix`, keyed by name without the prefix, as `f64`.
pub fn save_named_tensors(store: &ParamStore, prefix: &str) -> NamedTensors {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| {
            (
                p.name[prefix.len()..].to_string(),
                (ArchiveDtype::F64, p.tensor.clone()),
            )
        })
        .collect()
}

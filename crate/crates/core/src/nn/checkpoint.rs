//! Parameter checkpoints: a JSON manifest next to one raw little-endian
//! `f64` file per named parameter array.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// Model kind tag, e.g. `healthgen`, `srnn`, `grud`.
    pub model: String,
    pub seed: u64,
    pub epoch: usize,
    /// Echo of the model configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &str,
    store: &ParamStore,
    config: serde_json::Value,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let v = store.value(id);
        let file = format!("{name}.f64");
        let mut bytes = Vec::with_capacity(v.len() * 8);
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let p = dir.join(&file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            dtype: "f64".into(),
            shape: [v.nrows(), v.ncols()],
        });
    }
    let manifest = CheckpointManifest {
        format: "healthgen-checkpoint".into(),
        model: model.into(),
        seed,
        epoch,
        config,
        tensors,
    };
    let p = dir.join(CHECKPOINT_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads tensor values into an existing store whose layout (names and
/// shapes) must match the checkpoint exactly.
pub fn load_checkpoint_into(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let manifest = read_checkpoint_manifest(dir)?;
    let corrupt = |array: &str, reason: String| Error::CorruptArchive {
        path: dir.to_path_buf(),
        array: array.to_string(),
        reason,
    };
    if manifest.tensors.len() != store.len() {
        return Err(corrupt(
            "checkpoint",
            format!("{} tensors, model has {}", manifest.tensors.len(), store.len()),
        ));
    }
    for entry in &manifest.tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| corrupt(&entry.name, "not a parameter of this model".into()))?;
        let shape = store.value(id).dim();
        if (entry.shape[0], entry.shape[1]) != shape {
            return Err(corrupt(&entry.name, format!("shape {:?}, model expects {shape:?}", entry.shape)));
        }
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != shape.0 * shape.1 * 8 {
            return Err(corrupt(&entry.name, format!("{} bytes on disk", bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *store.value_mut(id) = Array2::from_shape_vec(shape, vals).unwrap();
    }
    Ok(manifest)
}

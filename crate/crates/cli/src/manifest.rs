//! Run manifests: what a command read and wrote, by content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Hash of the resolved configuration, output root excluded.
    pub config_sha256: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files under `path` (or `path` itself), sorted.
fn files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(path).map_err(|e| CliError::io(path, e))?;
    let mut children: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(path, err)))
        .collect::<Result<_, _>>()?;
    children.sort();
    for c in children {
        out.extend(files(&c)?);
    }
    Ok(out)
}

/// Collects hashed inputs and outputs for one command.
pub struct Recorder {
    root: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl Recorder {
    pub fn new(root: &Path) -> Self {
        Recorder {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Run-directory paths are stored relative to the root so two run
    /// directories with the same content produce the same manifest.
    fn hash_all(&self, path: &Path) -> Result<Vec<FileHash>, CliError> {
        files(path)?
            .into_iter()
            .map(|f| {
                let bytes = std::fs::read(&f).map_err(|e| CliError::io(&f, e))?;
                let shown = f.strip_prefix(&self.root).unwrap_or(&f);
                Ok(FileHash {
                    path: shown.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect()
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let h = self.hash_all(path)?;
        self.inputs.extend(h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let h = self.hash_all(path)?;
        self.outputs.extend(h);
        Ok(())
    }

    pub fn finish(mut self, command: &str, seed: u64, config_sha256: String) -> Result<PathBuf, CliError> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.inputs.dedup();
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.dedup();
        let manifest = RunManifest {
            command: command.to_string(),
            seed,
            config_sha256,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let dir = self.root.join("manifests");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join(format!("{command}.json"));
        let mut text = serde_json::to_string_pretty(&manifest).map_err(healthgen::Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

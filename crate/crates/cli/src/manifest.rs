//! Run manifest: what was written, with content digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Digest of the parsed config, so formatting changes do not matter.
    pub config_sha256: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files under one directory and records their digests.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        let canonical = serde_json::to_vec(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_sha256: sha256_hex(&canonical),
                seed: cfg.seed,
                files: Vec::new(),
                metrics: BTreeMap::new(),
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.files.retain(|f| f.path != name);
        self.manifest.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn metric(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.manifest.metrics.insert(key.to_string(), value.into());
    }

    /// Writes `manifest.json` last; it lists every other file.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        json.push(b'\n');
        let path = self.root.join("manifest.json");
        std::fs::write(&path, json).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

//! The record written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mgnetlab::{Precision, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub model: String,
    pub dataset: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    pub version: String,
    /// Everything runs on the calling thread.
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &str, model: &str, dataset: &str, config: TrainConfig, out: &Path) -> Self {
        RunManifest {
            command: command.into(),
            model: model.into(),
            dataset: dataset.into(),
            seed: config.seed,
            precision: config.precision,
            config,
            out: out.to_path_buf(),
            version: env!("CARGO_PKG_VERSION").into(),
            threads: 1,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

//! Persistence, reproducibility records, experiment pipeline and the CLI.

mod checkpoint;
mod cli;
mod dataset;
mod pipeline;
mod recipe;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_kind, load_cdae, load_checkpoint, load_deepbeat, load_forest, save_cdae, save_deepbeat, save_forest, CheckpointManifest,
    ModelKind, SavedModel, TensorEntry, CHECKPOINT_VERSION,
};
pub use cli::{cli_dispatch, inspect_table, OUT_DIR_ENV};
pub use dataset::{load_dataset, save_dataset, CountRow, DatasetBundle, DatasetManifest, LabelRow, DATASET_VERSION};
pub use pipeline::{
    eval_records, forest_predictions, simulate_bundle, spread, train_baseline, train_mode, TrainMode,
};
pub use recipe::parse_recipe;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decode a little-endian f32 blob; `field` names the file in errors.
pub(crate) fn f32_values(bytes: &[u8], field: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::load(field, format!("{} bytes is not a whole number of 32-bit values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn read_file(path: &Path, field: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(field, format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub crate_version: String,
    pub dataset_format: u32,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: DATASET_VERSION,
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

/// What a command was run with. Replaying the command with `config` and
/// the listed inputs reproduces its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_digest: String,
    /// `(path, sha256 of its manifest)` of every artifact read.
    pub inputs: Vec<(String, String)>,
    pub versions: Versions,
}

impl RunRecord {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C, inputs: Vec<(String, String)>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_digest = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Self {
            command: command.to_string(),
            seed,
            config,
            config_digest,
            inputs,
            versions: Versions::default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

//! Library side of the `codistill` binary: command bodies, run manifests and
//! the ablation harness. Every command writes `manifest.json` into its output
//! directory before doing any work, and `replay` re-runs a command from that
//! file alone.

pub mod ablate;
pub mod commands;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

pub use commands::Invocation;
pub use manifest::Manifest;

/// Reads a JSON config, naming the offending field on failure.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow::anyhow!("config {}: field `{field}`: {}", path.display(), e.inner())
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 over the named files of a directory, in the given order.
pub fn files_sha256(dir: &Path, names: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub const DATASET_FILES: [&str; 4] = ["meta.json", "train.jsonl", "val.jsonl", "test.jsonl"];

pub fn dataset_sha256(dir: &Path) -> Result<String> {
    files_sha256(dir, &DATASET_FILES)
}

/// Absolute form of `path` without touching the filesystem.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

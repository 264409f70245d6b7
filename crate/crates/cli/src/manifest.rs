use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::commands::{InputKind, Invocation};
use crate::{dataset_sha256, file_sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a command: the merged configuration, the seed,
/// fingerprints of every input and the files the command will write.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub invocation: Invocation,
    pub inputs: IndexMap<String, InputRecord>,
    pub outputs: Vec<PathBuf>,
}

fn fingerprint(kind: InputKind, path: &Path) -> Result<String> {
    match kind {
        InputKind::Dataset => dataset_sha256(path),
        InputKind::File => file_sha256(path),
    }
}

impl Manifest {
    pub fn new(invocation: &Invocation) -> Result<Self> {
        let mut inputs = IndexMap::new();
        for (name, kind, path) in invocation.inputs() {
            let sha256 = fingerprint(kind, &path).with_context(|| format!("fingerprinting input `{name}`"))?;
            inputs.insert(name.to_string(), InputRecord { path, sha256 });
        }
        Ok(Manifest {
            tool: "codistill".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: invocation.seed(),
            invocation: invocation.clone(),
            inputs,
            outputs: invocation.outputs(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::load_config(path)
    }

    /// Fails if any recorded input no longer hashes to its recorded value.
    pub fn verify_inputs(&self) -> Result<()> {
        for (name, kind, path) in self.invocation.inputs() {
            let Some(rec) = self.inputs.get(name) else {
                bail!("manifest has no fingerprint for input `{name}`");
            };
            let now = fingerprint(kind, &path).with_context(|| format!("fingerprinting input `{name}`"))?;
            if now != rec.sha256 {
                bail!(
                    "input `{name}` ({}) changed since the manifest was written: {} != {}",
                    path.display(),
                    now,
                    rec.sha256
                );
            }
        }
        Ok(())
    }
}

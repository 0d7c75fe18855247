// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories: `root/<experiment>/<stage>/` holding artifacts, a config
//! snapshot and a manifest of artifact hashes.
//!
//! Layout (format version 1):
//!
//! ```text
//! runs/<experiment>/
//!   data/            facts.jsonl privacy.jsonl privacy_subset.jsonl privacy_train.jsonl privacy_eval.jsonl probes.jsonl tokenizer.json
//!   lm/              model.ckpt train.json
//!   lm-finetune/     model.ckpt train.json
//!   capture-<model>/ <site>_L<l>.ckpt
//!   sae-<model>/     <site>_L<l>.ckpt quality.json
//!   baseline-<model>/<kind>_<site>_L<l>.ckpt
//!   ablate/ attribute/ edit/ eval-erasure/ mono/ stability/ interpret/
//!   report/          summary.csv summary.json, rows for every experiment under the root
//! ```
//!
//! Every stage directory carries `config.toml` and `manifest.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Seeds};
use crate::PreconditionError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub experiment: String,
    pub stage: String,
    pub config_hash: String,
    pub seeds: Seeds,
    /// File name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Upstream files read, with their hashes at read time.
    pub inputs: BTreeMap<String, String>,
}

/// A stage directory being written.
pub struct Stage {
    pub dir: PathBuf,
    manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Fails with a precondition error naming `path` when it is missing.
pub fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PreconditionError(format!("missing upstream artifact {}", path.display())).into())
    }
}

impl Stage {
    pub fn begin(cfg: &RunConfig, stage: &str) -> anyhow::Result<Self> {
        let dir = cfg.experiment_dir().join(stage);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let stage_obj = Self {
            dir,
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                experiment: cfg.experiment.clone(),
                stage: stage.to_string(),
                config_hash: cfg.hash()?,
                seeds: cfg.seeds,
                artifacts: BTreeMap::new(),
                inputs: BTreeMap::new(),
            },
        };
        atomic_write(&stage_obj.dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        Ok(stage_obj)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        atomic_write(&path, bytes)?;
        self.manifest
            .artifacts
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    /// Serializes `value` wrapped with the config hash and seeds.
    pub fn write_report<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let wrapped = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "experiment": self.manifest.experiment,
            "config_hash": self.manifest.config_hash,
            "seeds": self.manifest.seeds,
            "report": value,
        });
        self.write(name, serde_json::to_string_pretty(&wrapped)?.as_bytes())
    }

    pub fn write_checkpoint(&mut self, name: &str, ck: &featlab::checkpoint::Checkpoint) -> anyhow::Result<PathBuf> {
        self.write(name, &ck.to_bytes())
    }

    /// Records an upstream file read by this stage.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<PathBuf> {
        require(path)?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        let path = self.dir.join("manifest.json");
        atomic_write(&path, serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        Ok(self.dir)
    }
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join("manifest.json");
    require(&path)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
}

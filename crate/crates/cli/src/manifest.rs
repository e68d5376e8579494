//! Run manifest: a JSON record in the experiment directory of which stages
//! completed, under which config hash and seed, and what they wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use assign_surrogate::table;
use assign_surrogate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// sha-256 over the resolved config snapshot plus the root seed; any change
/// to either invalidates downstream stages.
pub fn config_hash(snapshot: &Value, root_seed: u64) -> Result<String> {
    let canonical = serde_json::to_string(snapshot)
        .map_err(|e| Error::runtime(format!("config hashing: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hasher.update(b"\nseed=");
    hasher.update(root_seed.to_string().as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub config_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool_version: String,
    pub root_seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub stages: BTreeMap<String, StageRecord>,
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

impl Manifest {
    pub fn new(snapshot: Value, root_seed: u64, hash: String) -> Manifest {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed,
            config_hash: hash,
            config: snapshot,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = Manifest::path(dir);
        if !path.exists() {
            return Err(Error::validation(format!(
                "no run manifest at {}; start with `assign-surrogate net gen`",
                path.display()
            )));
        }
        let text = table::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(&path, 0, format!("bad manifest: {e}")))
    }

    /// Existing manifest if any, else a fresh one for this config.
    pub fn load_or_new(dir: &Path, snapshot: &Value, root_seed: u64, hash: &str) -> Result<Manifest> {
        if Manifest::path(dir).exists() {
            Manifest::load(dir)
        } else {
            Ok(Manifest::new(snapshot.clone(), root_seed, hash.to_string()))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::runtime(format!("manifest serialization: {e}")))?;
        table::write_string(&Manifest::path(dir), &format!("{text}\n"))
    }

    pub fn completed(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }

    /// Every upstream stage must have completed under the current config
    /// hash; `force` downgrades a hash mismatch, never a missing stage.
    pub fn require_upstream(
        &self,
        dir: &Path,
        upstream: &[(&str, &str)],
        current_hash: &str,
        force: bool,
    ) -> Result<()> {
        for (stage, command) in upstream {
            let Some(record) = self.stages.get(*stage) else {
                return Err(Error::validation(format!(
                    "stage `{stage}` has not completed in {} (manifest: {}); \
                     run `assign-surrogate {command}` first",
                    dir.display(),
                    Manifest::path(dir).display()
                )));
            };
            if record.config_hash != current_hash && !force {
                return Err(Error::validation(format!(
                    "stage `{stage}` ran under config {} but the current config is {}; \
                     rerun it or pass --force",
                    short(&record.config_hash),
                    short(current_hash)
                )));
            }
        }
        Ok(())
    }

    /// A completed stage is only rerun when forced.
    pub fn guard_overwrite(&self, dir: &Path, stage: &str, force: bool) -> Result<()> {
        if let Some(record) = self.stages.get(stage) {
            if !force {
                return Err(Error::validation(format!(
                    "stage `{stage}` already completed in {} (outputs: {}); \
                     pass --force to overwrite",
                    dir.display(),
                    record.outputs.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn record(&mut self, stage: &str, hash: &str, outputs: Vec<String>) {
        self.stages.insert(
            stage.to_string(),
            StageRecord { config_hash: hash.to_string(), outputs },
        );
    }
}

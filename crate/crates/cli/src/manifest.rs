//! Per-run record of what was executed and what it produced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Entries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub larl_version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            larl_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub started_unix_ms: u128,
    pub ended_unix_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
    pub command: String,
}

/// Everything needed to rerun: resolved configuration, environment,
/// commands with timestamps, and a hash of every artifact written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Settings as given, oldest first; later commands layer on top.
    #[serde(default)]
    pub settings: Entries,
    pub config: Option<serde_json::Value>,
    pub environment: Option<Environment>,
    pub commands: Vec<CommandRecord>,
    /// Keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, Artifact>,
    pub checkpoints: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn load_or_default(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text =
            std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let p = root.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", p.display()))
    }

    /// Hashes `rel` under `root` and records it.
    pub fn artifact(&mut self, root: &Path, rel: &str, command: &str) -> Result<()> {
        let (sha256, bytes) = sha256_file(&root.join(rel))?;
        self.artifacts.insert(
            rel.to_string(),
            Artifact {
                sha256,
                bytes,
                command: command.to_string(),
            },
        );
        Ok(())
    }

    pub fn checkpoint(&mut self, root: &Path, rel: &str, command: &str) -> Result<()> {
        self.artifact(root, rel, command)?;
        if !self.checkpoints.iter().any(|c| c == rel) {
            self.checkpoints.push(rel.to_string());
        }
        Ok(())
    }
}

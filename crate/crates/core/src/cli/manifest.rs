use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::DomainAccess;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CONFIG_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub model_id: String,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub framework_version: String,
    /// sha256 of the canonical configuration text stored next to the manifest.
    pub config_hash: String,
    pub config: PathBuf,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub models: Vec<String>,
    pub artifacts: Vec<Artifact>,
    /// Dataset accesses over the whole run, by domain.
    pub data_access: BTreeMap<String, DomainAccess>,
    /// Files read from target domains across all models.
    pub target_file_reads: usize,
    /// Unix seconds; zero in deterministic mode.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `SEGCLR_DETERMINISTIC` set to anything but `0`/empty zeroes timestamps.
pub fn deterministic_mode() -> bool {
    std::env::var("SEGCLR_DETERMINISTIC").is_ok_and(|v| !v.is_empty() && v != "0")
}

pub fn now_unix() -> u64 {
    if deterministic_mode() {
        return 0;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Writes the manifest after checking that every referenced file exists.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut paths = vec![self.config.clone()];
        for a in &self.artifacts {
            paths.push(a.checkpoint.clone());
            paths.push(a.history.clone());
        }
        if let Some(p) = paths.iter().find(|p| !dir.join(p).is_file()) {
            return Err(Error::Missing(format!("artifact {} referenced by the manifest", dir.join(p).display())));
        }
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use cpe_core::report::{sha256_hex, to_canonical_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// `results`, `summary`, `telemetry`, `audit` or `events`.
    pub kind: String,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the config file bytes; absent when no file was given.
    pub config_file_sha256: Option<String>,
    /// SHA-256 of the canonical, fully defaulted trial config.
    pub config_digest: String,
    /// The fully defaulted config the run used.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    pub engine_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Write `contents` to `dir/name` and describe it.
pub fn write_artifact(dir: &Path, name: &str, kind: &str, contents: &[u8]) -> std::io::Result<Artifact> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(Artifact {
        kind: kind.to_string(),
        path,
        sha256: sha256_hex(contents),
        bytes: contents.len() as u64,
    })
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, to_canonical_json(self))?;
        Ok(path)
    }
}

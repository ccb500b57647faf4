//! `manifest.json`: what a run directory holds and how each stage went.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stealthpatch_core::trainer::TrainPlan;

use crate::error::{io_err, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    /// As given on the command line or in the config.
    pub path: PathBuf,
    pub sha256: String,
    pub dims: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub param_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    /// SHA-256 of the resolved training config.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub input: InputRecord,
    pub surrogate: ModelRecord,
    #[serde(default)]
    pub transfer_models: Vec<ModelRecord>,
    pub plan: TrainPlan,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
    /// Paths relative to the run directory. Every entry exists on disk.
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic id from the config and input hashes.
pub fn run_id(config_hash: &str, input_sha: &str) -> String {
    sha256_hex(format!("{config_hash}:{input_sha}").as_bytes())[..16].to_string()
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Validation(format!("{} is not a run directory: {e}", dir.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Write atomically through a temporary file.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    /// Record `rel` if it exists under `dir`.
    pub fn add_artifact(&mut self, dir: &Path, rel: impl Into<PathBuf>) {
        let rel = rel.into();
        if dir.join(&rel).exists() && !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
            self.artifacts.sort();
        }
    }

    /// Artifacts listed but absent on disk.
    pub fn missing_artifacts(&self, dir: &Path) -> Vec<PathBuf> {
        self.artifacts.iter().filter(|a| !dir.join(a).exists()).cloned().collect()
    }

    /// Run `f` as stage `name`, recording its outcome and timing, and save
    /// the manifest whether it succeeded or not.
    pub fn stage<T>(&mut self, dir: &Path, name: &str, f: impl FnOnce(&mut Self) -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f(self);
        let record = StageRecord {
            status: if out.is_ok() { StageStatus::Ok } else { StageStatus::Failed },
            seconds: start.elapsed().as_secs_f64(),
            error: out.as_ref().err().map(|e| e.to_string()),
        };
        self.stages.insert(name.to_string(), record);
        self.save(dir)?;
        out
    }
}

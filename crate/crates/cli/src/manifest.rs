//! Run manifest: which stages finished, what they wrote, and headline metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_unix: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let now = unix_now();
        RunManifest {
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now,
            updated_unix: now,
            stages: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        ))
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_unix = unix_now();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    /// True when `stage` completed and all of its artifacts are on disk.
    pub fn is_complete(&self, dir: &Path, stage: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|s| s.artifacts.iter().all(|a| dir.join(a).exists()))
    }

    pub fn complete(&mut self, stage: &str, artifacts: &[&str]) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                completed_unix: unix_now(),
                artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            },
        );
    }

    /// Artifacts referenced by the manifest that are missing from `dir`.
    pub fn missing_artifacts(&self, dir: &Path) -> Vec<String> {
        self.stages
            .values()
            .flat_map(|s| s.artifacts.iter())
            .filter(|a| !dir.join(a).exists())
            .cloned()
            .collect()
    }
}

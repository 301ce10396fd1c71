//! Run manifest: what a run directory contains, how far the pipeline
//! got, and which config produced it. Written as pretty JSON so run
//! directories are self-describing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pipeline position markers recorded in the manifest. A successful
/// run ends at `complete`; a failed run records the stage it died in.
pub const STAGE_COMPLETE: &str = "complete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// FNV-1a hash of the resolved config's canonical form.
    pub config_hash: String,
    pub seed: u64,
    pub created_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    /// Last pipeline stage that ran; [`STAGE_COMPLETE`] on success.
    pub stage_reached: String,
    /// File names relative to the run directory, in creation order.
    pub artifacts: Vec<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| u64::try_from(d.as_millis()).unwrap_or(u64::MAX))
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(config: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.config_hash(),
            seed: config.seed,
            created_unix_ms: now_ms(),
            finished_unix_ms: None,
            stage_reached: "start".to_string(),
            artifacts: Vec::new(),
        }
    }

    /// Records that a stage ran (used for both progress and the point
    /// of failure).
    pub fn reach(&mut self, stage: &str) {
        self.stage_reached = stage.to_string();
    }

    /// Registers a file the run wrote, by name relative to the run dir.
    pub fn record_artifact(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    /// Marks the run finished and verifies every recorded artifact
    /// actually exists in the run directory.
    pub fn finish(&mut self, run_dir: &Path) -> anyhow::Result<()> {
        for name in &self.artifacts {
            let path = run_dir.join(name);
            if !path.is_file() {
                anyhow::bail!("manifest lists missing artifact {}", path.display());
            }
        }
        self.reach(STAGE_COMPLETE);
        self.finished_unix_ms = Some(now_ms());
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = run_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).context("manifest serializes")?;
        fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

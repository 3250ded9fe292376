use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sketch_anchor::experiment::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command: the resolved configuration, where
/// the data came from and what was written.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data: Option<PathBuf>,
    pub git_describe: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, data: Option<&Path>) -> Self {
        Self {
            command: command.into(),
            seed: config.train.seed,
            config: config.clone(),
            data: data.map(Path::to_path_buf),
            git_describe: git_describe(),
            started_at: now(),
            finished_at: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(&mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_at = Some(now());
        self.outputs = outputs;
        self.write(dir)
    }
}

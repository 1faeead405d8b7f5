use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific counts and aggregates.
    pub summary: serde_json::Value,
    pub version: String,
    pub duration_s: f64,
    /// False when the command stopped early; outputs may then be partial.
    pub complete: bool,
    pub error: Option<String>,
}

/// Accumulates manifest fields while a command runs.
pub struct Recorder {
    started: Instant,
    pub manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                config: serde_json::Value::Null,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                summary: serde_json::Value::Null,
                version: env!("CARGO_PKG_VERSION").to_string(),
                duration_s: 0.0,
                complete: false,
                error: None,
            },
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.manifest.outputs.extend(paths);
    }

    pub fn summary(&mut self, summary: serde_json::Value) {
        self.manifest.summary = summary;
    }

    pub fn finish(mut self, out: &Path, error: Option<&anyhow::Error>) -> Result<RunManifest> {
        self.manifest.duration_s = self.started.elapsed().as_secs_f64();
        self.manifest.complete = error.is_none();
        self.manifest.error = error.map(|e| format!("{e:#}"));
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

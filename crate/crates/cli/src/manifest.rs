//! Per-command run records written next to the outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    /// SHA-256 of the file, or of the sorted `(relative path, file hash)` list for a directory.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
}

/// Collects a [`RunManifest`] while a command runs.
pub struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: VERSION.to_string(),
                config_path: None,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
                wall_clock_seconds: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, path: Option<&Path>) {
        self.manifest.config_path = path.map(|p| p.display().to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    /// Records an input and its content hash.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = hash_path(path)?;
        self.manifest.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Writes `<dir>/<command>.manifest.json`.
    pub fn finish(mut self, dir: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_clock_seconds = self.clock.elapsed().as_secs_f64();
        let path = dir.join(format!("{}.manifest.json", self.manifest.command));
        let text =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}

pub fn hash_path(path: &Path) -> CliResult<String> {
    let meta = std::fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if !meta.is_dir() {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let full = path.join(&rel);
        let bytes = std::fs::read(&full).map_err(|e| CliError::io(&full, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !path.to_string_lossy().ends_with(".manifest.json") {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

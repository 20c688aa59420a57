//! Run bookkeeping: the manifest written before any work starts, the
//! per-epoch metrics log, and the wall clock.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mare_core::training::{Clock, EpochMetrics};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("MARE_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration of the run.
    pub config: serde_json::Value,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_path: Option<&Path>, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_string(&config).unwrap_or_default();
        Self {
            command: command.into(),
            version: VERSION.into(),
            seed,
            args: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            config_hash: mare_core::eval::config_hash(&canonical),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Appends one JSON object per epoch and flushes after each line, so the
/// log survives an interrupted run.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<(), CliError> {
        let io = |e| CliError::io(&self.path, e);
        serde_json::to_writer(&mut self.out, m).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Milliseconds since construction.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

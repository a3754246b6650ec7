//! Run directories: creation rules, the advisory lock and provenance files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const BUILD_ID: &str = env!("LAB_BUILD_ID");

pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
    metrics: BufWriter<File>,
    started: Instant,
}

impl RunDir {
    /// Prepares `path` for a run of `command`. A non-empty directory is only
    /// reused with `force`; a directory holding a lock is never reused.
    pub fn create(path: &Path, force: bool, config: &ExperimentConfig) -> Result<Self> {
        let lock = path.join(".lock");
        if lock.exists() {
            bail!("{} is locked by another run (remove {} if it is stale)", path.display(), lock.display());
        }
        if path.exists() {
            let non_empty = fs::read_dir(path).with_context(|| format!("cannot read {}", path.display()))?.next().is_some();
            if non_empty && !force {
                bail!("{} is not empty (use --force to reuse it)", path.display());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("cannot lock {}", path.display()))?
            .write_all(format!("{}\n", std::process::id()).as_bytes())?;
        fs::write(path.join("config.resolved.toml"), config.to_toml()?)?;
        let metrics = BufWriter::new(File::create(path.join("metrics.jsonl"))?);
        Ok(Self { path: path.to_path_buf(), lock, metrics, started: Instant::now() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn metric<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }

    /// Flushes metrics, writes `run_info.json` and releases the lock.
    pub fn finish(mut self, command: &str, config: &ExperimentConfig, results: serde_json::Value) -> Result<()> {
        self.metrics.flush()?;
        let info = RunInfo {
            command: command.to_string(),
            method: if config.name.is_empty() { command.to_string() } else { config.name.clone() },
            seed: config.seed,
            config_hash: config.hash()?,
            build_id: BUILD_ID.to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            results,
        };
        self.write_json("run_info.json", &info)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub build_id: String,
    pub wall_time_secs: f64,
    /// Named scalar outcomes of the run (e.g. `dev_bleu`).
    pub results: serde_json::Value,
}

//! Run directories: every training or evaluation run owns a directory with
//! the exact resolved config, a `metrics.jsonl` trace, checkpoints and
//! snapshot images - enough to reproduce the run from scratch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create the directory (parents included) and echo the resolved config.
    pub fn create(root: &Path, config: &ModelConfig, seed: u64) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        let resolved = serde_json::json!({
            "seed": seed,
            "config": config,
        });
        let path = root.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(&resolved).unwrap())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Append one JSON record to `metrics.jsonl`.
    pub fn append_metric<T: Serialize>(&self, record: &T) -> Result<()> {
        let path = self.root.join("metrics.jsonl");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Other(format!("metric encode: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

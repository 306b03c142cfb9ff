//! Run records: the provenance of every artifact the harness writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const MATRIX_RECORD_FILE: &str = "matrix_record.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generate_s: f64,
    pub train_s: f64,
    pub evaluate_s: f64,
    pub total_s: f64,
}

/// One (d, seed) cell. Paths are relative to the cell directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub d: usize,
    pub seed: u64,
    pub config_hash: String,
    pub train_config_hash: Option<String>,
    /// Crate version plus a content hash of the produced artifacts.
    pub artifact_version: String,
    pub status: CellStatus,
    pub error: Option<String>,
    pub timing: Timing,
    pub dataset: Option<PathBuf>,
    pub dataset_checksum: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

impl RunRecord {
    /// Every file or directory this record vouches for, relative to its cell.
    pub fn artifacts(&self) -> Vec<&Path> {
        self.dataset
            .iter()
            .chain(&self.checkpoint)
            .chain(&self.train_log)
            .chain(&self.metrics)
            .map(PathBuf::as_path)
            .collect()
    }

    /// Completed, produced from `hash`, and with every artifact still present.
    pub fn is_reusable(&self, dir: &Path, hash: &str) -> bool {
        self.status == CellStatus::Completed
            && self.config_hash == hash
            && self.artifacts().iter().all(|p| dir.join(p).exists())
    }
}

/// The matrix run: cell records plus the aggregate views built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub artifact_version: String,
    pub cells: Vec<PathBuf>,
    pub failed: Vec<String>,
    pub aggregate: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub wall_time_s: f64,
}

/// `<crate version>-g<first 10 hex digits of sha256 over the files>`.
pub fn artifact_version(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        if f.is_file() {
            h.update(fs::read(f).map_err(|e| HarnessError::io(f, e))?);
        }
    }
    let digest = hex::encode(h.finalize());
    Ok(format!("{}-g{}", env!("CARGO_PKG_VERSION"), &digest[..10]))
}

/// Writes JSON through a temporary file and a rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.sync_all())
        .map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

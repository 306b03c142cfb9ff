use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CausalGraph, DatasetConfig, LinearGaussianScm, PairDataset};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const META_FILE: &str = "meta.json";

/// Array files in checksum order.
const ARRAY_FILES: [&str; 7] = [
    "x.npy",
    "x_tilde.npy",
    "z.npy",
    "z_tilde.npy",
    "eps.npy",
    "eps_tilde.npy",
    "targets.npy",
];

/// Structured-text sidecar stored next to the array files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub n_pairs: usize,
    pub obs_dim: usize,
    pub topo_order: Vec<usize>,
    pub adjacency: Vec<Vec<u8>>,
    pub weights: Vec<Vec<f64>>,
    pub noise_var: Vec<f64>,
    pub projection: Vec<Vec<f64>>,
    pub target_distribution: String,
    /// Arrays and metadata fields that only evaluation code may read.
    pub evaluation_only: Vec<String>,
    pub checksum: String,
}

impl DatasetMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt {
                path: path.clone(),
                reason: "missing schema_version".into(),
            })? as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path,
                expected: SCHEMA_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

fn npy_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn checksum_files(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ARRAY_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes the dataset as a directory of `.npy` arrays plus `meta.json`.
pub fn save_dataset(dataset: &PairDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays: [(&str, &Array2<f64>); 6] = [
        ("x.npy", &dataset.x),
        ("x_tilde.npy", &dataset.x_tilde),
        ("z.npy", &dataset.z),
        ("z_tilde.npy", &dataset.z_tilde),
        ("eps.npy", &dataset.eps),
        ("eps_tilde.npy", &dataset.eps_tilde),
    ];
    for (name, a) in arrays {
        let path = dir.join(name);
        write_npy(&path, a).map_err(|e| npy_err(&path, e))?;
    }
    let targets: Array1<i64> = dataset.targets.iter().map(|&t| t as i64).collect();
    let path = dir.join("targets.npy");
    write_npy(&path, &targets).map_err(|e| npy_err(&path, e))?;

    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        config: dataset.config.clone(),
        n_pairs: dataset.len(),
        obs_dim: dataset.x.ncols(),
        topo_order: dataset.scm.graph.topo_order.clone(),
        adjacency: dataset.scm.graph.adjacency.clone(),
        weights: dataset.scm.weights.clone(),
        noise_var: dataset.scm.noise_var.clone(),
        projection: dataset
            .projection
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        target_distribution: "uniform".into(),
        evaluation_only: [
            "z",
            "z_tilde",
            "eps",
            "eps_tilde",
            "targets",
            "adjacency",
            "weights",
            "noise_var",
            "projection",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        checksum: checksum_files(dir)?,
    };
    let path = dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(dir.to_path_buf())
}

/// Loads a dataset, checking schema version and array checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PairDataset> {
    let dir = dir.as_ref();
    let meta = DatasetMeta::read(dir)?;
    let computed = checksum_files(dir)?;
    if computed != meta.checksum {
        return Err(Error::Checksum {
            path: dir.to_path_buf(),
            recorded: meta.checksum,
            computed,
        });
    }
    let read2 = |name: &str| -> Result<Array2<f64>> {
        let path = dir.join(name);
        read_npy(&path).map_err(|e| npy_err(&path, e))
    };
    let path = dir.join("targets.npy");
    let targets: Array1<i64> = read_npy(&path).map_err(|e| npy_err(&path, e))?;
    let d = meta.config.d;
    let projection = Array2::from_shape_fn((meta.obs_dim, d), |(i, j)| meta.projection[i][j]);
    let dataset = PairDataset {
        scm: LinearGaussianScm {
            graph: CausalGraph {
                d,
                adjacency: meta.adjacency,
                topo_order: meta.topo_order,
            },
            weights: meta.weights,
            noise_var: meta.noise_var,
        },
        config: meta.config,
        projection,
        x: read2("x.npy")?,
        x_tilde: read2("x_tilde.npy")?,
        z: read2("z.npy")?,
        z_tilde: read2("z_tilde.npy")?,
        eps: read2("eps.npy")?,
        eps_tilde: read2("eps_tilde.npy")?,
        targets: targets.iter().map(|&t| t as usize).collect(),
    };
    if dataset.len() != meta.n_pairs || dataset.x.nrows() != meta.n_pairs {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: format!("expected {} pairs", meta.n_pairs),
        });
    }
    Ok(dataset)
}

/// Checksum recorded in a saved dataset's metadata.
pub fn recorded_checksum(dir: impl AsRef<Path>) -> Result<String> {
    Ok(DatasetMeta::read(dir.as_ref())?.checksum)
}

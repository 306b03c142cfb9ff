//! Single-file checkpoints: magic, format version, JSON metadata, a raw
//! little-endian f64 tensor blob and a trailing sha256 over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{config_hash, DcrlModel, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, NamedTensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DCRLCKPT";
const HEADER: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Global index of the next epoch to run.
    pub next_epoch: usize,
    pub rng: ChaCha8Rng,
    pub adam_steps: BTreeMap<String, u64>,
    pub dataset_checksum: Option<String>,
    params: Vec<TensorEntry>,
    optimizer: Vec<TensorEntry>,
}

impl CheckpointMeta {
    /// `(phase, epoch within phase)` of the last completed epoch, if any.
    pub fn completed(&self) -> Option<(u8, usize)> {
        self.next_epoch
            .checked_sub(1)
            .and_then(|g| self.config.locate(g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
}

fn entries(ts: &[NamedTensor]) -> Vec<TensorEntry> {
    ts.iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(
        model: &DcrlModel,
        adam: &Adam,
        rng: &ChaCha8Rng,
        next_epoch: usize,
        config_hash: String,
        dataset_checksum: Option<String>,
    ) -> Result<Self> {
        let params = model.snapshot()?;
        let (adam_steps, optimizer) = adam.export()?;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                d: model.d,
                config: model.config.clone(),
                config_hash,
                next_epoch,
                rng: rng.clone(),
                adam_steps,
                dataset_checksum,
                params: entries(&params),
                optimizer: entries(&optimizer),
            },
            params,
            optimizer,
        })
    }

    /// Checks that this checkpoint was produced for `config` at dimension `d`.
    pub fn verify(&self, config: &TrainConfig, d: usize) -> Result<()> {
        let expected = config_hash(config, d)?;
        if self.meta.config_hash != expected {
            return Err(Error::ConfigHash {
                expected,
                found: self.meta.config_hash.clone(),
            });
        }
        Ok(())
    }
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let n: usize = ckpt
        .params
        .iter()
        .chain(&ckpt.optimizer)
        .map(|t| t.data.len())
        .sum();
    let mut buf = Vec::with_capacity(HEADER + meta.len() + 8 * n + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for t in ckpt.params.iter().chain(&ckpt.optimizer) {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != trailer {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            recorded: hex::encode(trailer),
            computed: hex::encode(computed),
        });
    }
    let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = HEADER
        .checked_add(meta_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("metadata length out of range"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&body[HEADER..meta_end])?;
    let mut cursor = meta_end;
    let mut read = |list: &[TensorEntry]| -> Result<Vec<NamedTensor>> {
        list.iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = cursor + 8 * n;
                if end > body.len() {
                    return Err(corrupt("tensor data truncated"));
                }
                let data = body[cursor..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                cursor = end;
                Ok(NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data,
                })
            })
            .collect()
    };
    let params = read(&meta.params)?;
    let optimizer = read(&meta.optimizer)?;
    if cursor != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

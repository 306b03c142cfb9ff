//! One (d, seed) cell: generate, train, evaluate, record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dcrl_core::evalx::{evaluate, write_metrics, EvalMode, EvalOptions, LatentAdapter, MetricsReport};
use dcrl_core::scmgen::{build_dataset, load_dataset, recorded_checksum, save_dataset, DatasetConfig, PairDataset};
use dcrl_core::trainer::{
    config_hash, load_checkpoint, train, DcrlModel, TrainConfig, TrainOptions, CHECKPOINT_FILE, LOG_FILE,
};

use crate::config::CellConfig;
use crate::error::{HarnessError, Result};
use crate::record::{artifact_version, read_json, write_json_atomic, CellStatus, RunRecord, Timing, RUN_RECORD_FILE};

pub const DATA_DIR: &str = "data";
pub const TRAIN_DIR: &str = "train";

/// Seed offset separating the random-latent baseline from the cell seed.
pub const BASELINE_SEED_OFFSET: u64 = 0x5eed_0000;

pub fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Single => "single",
        EvalMode::Trajectory => "trajectory",
    }
}

pub fn metrics_file(mode: EvalMode) -> String {
    format!("metrics_{}.jsonl", mode_name(mode))
}

/// Loads the dataset in `dir` if it was built from `config`, otherwise
/// builds and saves it. Returns the dataset and its checksum.
pub fn ensure_dataset(config: &DatasetConfig, dir: &Path) -> Result<(PairDataset, String)> {
    if let Ok(ds) = load_dataset(dir) {
        if &ds.config == config {
            return Ok((ds, recorded_checksum(dir)?));
        }
        log::warn!("{}: stale dataset, regenerating", dir.display());
    }
    let ds = build_dataset(config)?;
    save_dataset(&ds, dir)?;
    Ok((ds, recorded_checksum(dir)?))
}

/// Trains into `dir`, reusing a finished checkpoint or resuming a partial
/// one when it matches `config`, the dataset and its checksum.
pub fn ensure_trained(ds: &PairDataset, checksum: &str, config: &TrainConfig, dir: &Path) -> Result<DcrlModel> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let hash = config_hash(config, ds.d())?;
    let mut resume = None;
    if let Ok(ckpt) = load_checkpoint(&ckpt_path) {
        let matches = ckpt.meta.config_hash == hash && ckpt.meta.dataset_checksum.as_deref() == Some(checksum);
        if matches && ckpt.meta.next_epoch >= config.total_epochs() {
            return Ok(DcrlModel::from_checkpoint(&ckpt)?);
        }
        if matches {
            log::info!("{}: resuming at epoch {}", dir.display(), ckpt.meta.next_epoch);
            resume = Some(ckpt);
        } else {
            log::warn!("{}: checkpoint from another config, retraining", dir.display());
        }
    }
    if resume.is_none() && dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let outcome = train(
        ds,
        config,
        TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            resume,
            stop_after: None,
            dataset_checksum: Some(checksum.to_string()),
        },
    )?;
    Ok(outcome.model)
}

/// Model rows, followed by random-latent baseline rows when requested.
pub fn evaluate_cell(
    model: &DcrlModel,
    ds: &PairDataset,
    mode: EvalMode,
    options: &EvalOptions,
    baseline: Option<u64>,
) -> Result<Vec<MetricsReport>> {
    let mut rows = evaluate(LatentAdapter::Model(model), ds, mode, options)?;
    if let Some(seed) = baseline {
        // baseline rows are reported under the cell's seed for aggregation
        let mut base = evaluate(LatentAdapter::Random { seed }, ds, mode, options)?;
        for r in &mut base {
            r.seed = model.config.seed;
        }
        rows.extend(base);
    }
    Ok(rows)
}

/// Runs a cell in `dir`, skipping it when a completed record for the same
/// config already vouches for existing artifacts. A failure still leaves a
/// record describing it.
pub fn run_cell(cell: &CellConfig, dir: &Path) -> Result<RunRecord> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let hash = cell.hash();
    let record_path = dir.join(RUN_RECORD_FILE);
    if let Ok(r) = read_json::<RunRecord>(&record_path) {
        if r.is_reusable(dir, &hash) {
            log::info!("{}: cached", cell.name());
            return Ok(r);
        }
    }
    let mut record = RunRecord {
        cell: cell.name(),
        d: cell.d,
        seed: cell.seed,
        config_hash: hash,
        train_config_hash: None,
        artifact_version: String::new(),
        status: CellStatus::Failed,
        error: None,
        timing: Timing::default(),
        dataset: None,
        dataset_checksum: None,
        checkpoint: None,
        train_log: None,
        metrics: Vec::new(),
    };
    let clock = Instant::now();
    let outcome = execute(cell, dir, &mut record);
    record.timing.total_s = clock.elapsed().as_secs_f64();
    let files: Vec<PathBuf> = record.artifacts().iter().map(|p| dir.join(p)).collect();
    record.artifact_version = artifact_version(&files)?;
    match outcome {
        Ok(()) => {
            record.status = CellStatus::Completed;
            write_json_atomic(&record_path, &record)?;
            Ok(record)
        }
        Err(e) => {
            record.error = Some(e.to_string());
            write_json_atomic(&record_path, &record)?;
            Err(e)
        }
    }
}

fn execute(cell: &CellConfig, dir: &Path, record: &mut RunRecord) -> Result<()> {
    if cell.dataset.d != cell.d {
        return Err(HarnessError::config(format!(
            "cell d={} but dataset d={}",
            cell.d, cell.dataset.d
        )));
    }
    let t = Instant::now();
    let (ds, checksum) = ensure_dataset(&cell.dataset, &dir.join(DATA_DIR))?;
    record.timing.generate_s = t.elapsed().as_secs_f64();
    record.dataset = Some(DATA_DIR.into());
    record.dataset_checksum = Some(checksum.clone());

    let t = Instant::now();
    record.train_config_hash = Some(config_hash(&cell.train, cell.d)?);
    let train_dir = dir.join(TRAIN_DIR);
    let model = ensure_trained(&ds, &checksum, &cell.train, &train_dir)?;
    record.timing.train_s = t.elapsed().as_secs_f64();
    record.checkpoint = Some(Path::new(TRAIN_DIR).join(CHECKPOINT_FILE));
    record.train_log = Some(Path::new(TRAIN_DIR).join(LOG_FILE));

    let t = Instant::now();
    let baseline = cell.baseline.then_some(cell.seed ^ BASELINE_SEED_OFFSET);
    for &mode in &cell.modes {
        let rows = evaluate_cell(&model, &ds, mode, &cell.eval, baseline)?;
        let name = metrics_file(mode);
        write_metrics(dir.join(&name), &rows)?;
        record.metrics.push(name.into());
    }
    record.timing.evaluate_s = t.elapsed().as_secs_f64();
    Ok(())
}

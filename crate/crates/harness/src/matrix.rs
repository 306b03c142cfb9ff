//! The (d, seed) experiment matrix: cells in isolated child processes, a
//! barrier, then aggregation and plots from the stored metrics files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::cell::run_cell;
use crate::config::{CellConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::plot::plot_metrics;
use crate::record::{
    artifact_version, read_json, write_json_atomic, CellStatus, MatrixRecord, RunRecord, MATRIX_RECORD_FILE,
    RUN_RECORD_FILE,
};

pub const CELL_CONFIG_FILE: &str = "cell.json";
pub const CELL_LOG_FILE: &str = "cell.log";
pub const EXPERIMENT_FILE: &str = "experiment.json";

/// How cells are executed.
#[derive(Debug, Clone)]
pub enum Runner {
    /// `<exe> run-cell --cell <dir>/cell.json --out <dir>`, at most `jobs`
    /// at a time.
    Subprocess { exe: PathBuf, jobs: usize },
    /// Sequentially in this process.
    InProcess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSummary {
    pub record: MatrixRecord,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn cached(cell: &CellConfig, dir: &Path) -> bool {
    read_json::<RunRecord>(&dir.join(RUN_RECORD_FILE)).is_ok_and(|r| r.is_reusable(dir, &cell.hash()))
}

fn spawn(exe: &Path, dir: &Path) -> Result<Child> {
    let log_path = dir.join(CELL_LOG_FILE);
    let log = fs::File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
    let err = log.try_clone().map_err(|e| HarnessError::io(&log_path, e))?;
    Command::new(exe)
        .arg("run-cell")
        .arg("--cell")
        .arg(dir.join(CELL_CONFIG_FILE))
        .arg("--out")
        .arg(dir)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(err)
        .spawn()
        .map_err(|e| HarnessError::Runtime(format!("spawning {}: {e}", exe.display())))
}

/// Runs every cell not already completed, then aggregates. Cells that fail
/// are listed and turn the result into [`HarnessError::PartialMatrix`] after
/// the aggregate over the surviving cells has been written.
pub fn run_matrix(config: &ExperimentConfig, runner: &Runner) -> Result<MatrixSummary> {
    config.validate()?;
    let clock = Instant::now();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_json_atomic(&out.join(EXPERIMENT_FILE), config)?;

    let cells = config.cells();
    let mut pending = Vec::new();
    let mut skipped = Vec::new();
    for cell in &cells {
        let dir = config.cell_dir(cell);
        if cached(cell, &dir) {
            log::info!("{}: cached, skipping", cell.name());
            skipped.push(cell.name());
        } else {
            fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            write_json_atomic(&dir.join(CELL_CONFIG_FILE), cell)?;
            pending.push(cell.clone());
        }
    }
    let executed: Vec<String> = pending.iter().map(CellConfig::name).collect();

    match runner {
        Runner::InProcess => {
            for cell in &pending {
                if let Err(e) = run_cell(cell, &config.cell_dir(cell)) {
                    log::error!("{}: {e}", cell.name());
                }
            }
        }
        Runner::Subprocess { exe, jobs } => {
            let jobs = (*jobs).max(1);
            let mut queue = pending.iter();
            let mut running: Vec<(String, Child)> = Vec::new();
            loop {
                while running.len() < jobs {
                    let Some(cell) = queue.next() else { break };
                    log::info!("{}: started", cell.name());
                    running.push((cell.name(), spawn(exe, &config.cell_dir(cell))?));
                }
                if running.is_empty() {
                    break;
                }
                let mut still = Vec::new();
                for (name, mut child) in running {
                    match child.try_wait() {
                        Ok(Some(status)) => log::info!("{name}: exited with {status}"),
                        Ok(None) => still.push((name, child)),
                        Err(e) => log::error!("{name}: {e}"),
                    }
                }
                running = still;
                thread::sleep(Duration::from_millis(100));
            }
        }
    }

    // barrier passed: every cell has finished or failed
    let mut failed = Vec::new();
    let mut records = Vec::new();
    let mut metrics = Vec::new();
    for cell in &cells {
        let dir = config.cell_dir(cell);
        let path = dir.join(RUN_RECORD_FILE);
        match read_json::<RunRecord>(&path) {
            Ok(r) if r.status == CellStatus::Completed && r.config_hash == cell.hash() => {
                metrics.extend(r.metrics.iter().map(|m| dir.join(m)));
                records.push(path);
            }
            Ok(r) => {
                failed.push(format!("{} ({})", cell.name(), r.error.unwrap_or_else(|| "stale record".into())));
                records.push(path);
            }
            Err(_) => failed.push(format!("{} (no run record; see {})", cell.name(), dir.join(CELL_LOG_FILE).display())),
        }
    }
    let (aggregate, plots) = if metrics.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let p = plot_metrics(&metrics, out)?;
        (p.tables, p.plots)
    };
    let version_inputs: Vec<PathBuf> = records.iter().chain(&aggregate).cloned().collect();
    let relative = |p: &PathBuf| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
    let record = MatrixRecord {
        artifact_version: artifact_version(&version_inputs)?,
        cells: records.iter().map(relative).collect(),
        failed: failed.clone(),
        aggregate: aggregate.iter().map(relative).collect(),
        plots: plots.iter().map(relative).collect(),
        wall_time_s: clock.elapsed().as_secs_f64(),
    };
    write_json_atomic(&out.join(MATRIX_RECORD_FILE), &record)?;
    if !failed.is_empty() {
        return Err(HarnessError::PartialMatrix {
            failed: failed.len(),
            total: cells.len(),
            cells: failed,
        });
    }
    Ok(MatrixSummary {
        record,
        executed,
        skipped,
    })
}

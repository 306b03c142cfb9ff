use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcrl_core::evalx::{evaluate, evaluate_checkpoint, write_metrics, EvalMode, LatentAdapter, MetricsReport};
use dcrl_core::scmgen::{build_dataset, load_dataset, recorded_checksum, save_dataset, Split};
use dcrl_core::trainer::{load_checkpoint, train, TrainOptions, CHECKPOINT_FILE};

use crate::cell::{metrics_file, run_cell};
use crate::config::{load_eval_options, load_train_config, output_root, parse_phase_epochs, CellConfig, ExperimentConfig, Profile, OUTPUT_ROOT_ENV};
use crate::error::{HarnessError, Result};
use crate::matrix::{run_matrix, Runner};
use crate::plot::plot_metrics;
use crate::record::read_json;

#[derive(Debug, Parser)]
#[command(name = "dcrl", version, about = "Diffusion-based causal representation learning experiments")]
pub struct Cli {
    /// Root for outputs given without an explicit path.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample an SCM and a dataset of weakly supervised pairs.
    GenerateData(GenerateArgs),
    /// Train (or resume) a model on a saved dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a reference adapter on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run the (d, seed) matrix and aggregate it.
    RunMatrix(MatrixArgs),
    /// Aggregate metrics files into tables and plots.
    Plot(PlotArgs),
    /// Run one matrix cell (used by run-matrix child processes).
    #[command(hide = true)]
    RunCell(RunCellArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
    pub d: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub edge_prob: Option<f64>,
    /// Output directory (default: <root>/data/d<d>_seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by generate-data.
    #[arg(long, alias = "dataset")]
    pub data: PathBuf,
    /// TOML training config, overlaid on the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    /// Phase lengths as `a,b,c`.
    #[arg(long, value_parser = parse_phase_epochs)]
    pub phase_epochs: Option<[usize; 3]>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many global epochs (the checkpoint stays resumable).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Output directory (default: <root>/train/<dataset dir name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdapterArg {
    /// The trained model in --checkpoint.
    Model,
    /// Ground-truth latents and targets.
    #[value(alias = "oracle")]
    GroundTruth,
    /// Independent random latents (null baseline).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    Trajectory,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => EvalMode::Single,
            ModeArg::Trajectory => EvalMode::Trajectory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, alias = "dataset")]
    pub data: PathBuf,
    /// Required with the model adapter.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AdapterArg::Model)]
    pub adapter: AdapterArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// TOML evaluation options (DCI, structure learner, SHD mode).
    #[arg(long)]
    pub eval_config: Option<PathBuf>,
    /// Seed of the random adapter.
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    /// Metrics file (default: metrics_<mode>.jsonl beside the checkpoint, or
    /// under <root>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Concurrent cell processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics files (JSON lines).
    #[arg(long, num_args = 1.., required_unless_present = "matrix")]
    pub metrics: Vec<PathBuf>,
    /// A run-matrix output directory; its completed cells' metrics are used.
    #[arg(long, conflicts_with = "metrics")]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunCellArgs {
    #[arg(long)]
    pub cell: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command. Usage and config errors exit 1,
/// runtime failures 2 and partial matrix failures 3.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let root = output_root(cli.output_root.as_deref());
    match cli.command {
        Command::GenerateData(a) => generate(a, &root),
        Command::Train(a) => train_cmd(a, &root),
        Command::Evaluate(a) => evaluate_cmd(a, &root),
        Command::RunMatrix(a) => matrix_cmd(a, &root),
        Command::Plot(a) => plot_cmd(a, &root),
        Command::RunCell(a) => {
            let cell: CellConfig = read_json(&a.cell)?;
            let r = run_cell(&cell, &a.out)?;
            println!("{}: {:?} in {:.1}s", r.cell, r.status, r.timing.total_s);
            Ok(())
        }
    }
}

fn generate(a: GenerateArgs, root: &Path) -> Result<()> {
    let d = a.d as usize;
    let overrides = crate::config::DatasetOverrides {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        edge_prob: a.edge_prob,
        w_min: None,
    };
    let config = overrides.apply(a.profile.dataset(d, a.seed));
    config.validate().map_err(HarnessError::config)?;
    let out = a
        .out
        .unwrap_or_else(|| root.join("data").join(format!("d{d}_seed{}", a.seed)));
    let ds = build_dataset(&config)?;
    save_dataset(&ds, &out)?;
    let mut so = std::io::stdout().lock();
    let _ = writeln!(
        so,
        "dataset d={} seed={} edges={} pairs={} (train {} / val {} / test {})",
        d,
        a.seed,
        ds.scm.graph.edge_count(),
        ds.len(),
        config.n_train,
        config.n_val,
        config.n_test
    );
    let _ = writeln!(so, "train target histogram: {:?}", ds.target_histogram(Split::Train));
    let _ = writeln!(so, "checksum: {}", recorded_checksum(&out)?);
    let _ = writeln!(so, "written to {}", out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, root: &Path) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let checksum = recorded_checksum(&a.data)?;
    let out = a.out.unwrap_or_else(|| {
        let name = a.data.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned());
        root.join("train").join(name)
    });
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let (config, resume) = if a.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let config = match &a.config {
            Some(_) => load_train_config(a.profile, a.config.as_deref(), a.phase_epochs, a.seed)?,
            None => {
                let mut c = ckpt.meta.config.clone();
                if let Some(p) = a.phase_epochs {
                    c.phase_epochs = p;
                }
                c
            }
        };
        ckpt.verify(&config, ds.d())?;
        if ckpt.meta.dataset_checksum.as_deref().is_some_and(|c| c != checksum) {
            return Err(HarnessError::Runtime(format!(
                "{} was trained on a different dataset",
                ckpt_path.display()
            )));
        }
        (config, Some(ckpt))
    } else {
        (load_train_config(a.profile, a.config.as_deref(), a.phase_epochs, a.seed)?, None)
    };
    let start = resume.as_ref().map_or(0, |c| c.meta.next_epoch);
    let outcome = train(
        &ds,
        &config,
        TrainOptions {
            out_dir: Some(out.clone()),
            resume,
            stop_after: a.stop_after,
            dataset_checksum: Some(checksum),
        },
    )?;
    let done = outcome.checkpoint.meta.next_epoch;
    println!(
        "trained epochs {start}..{done} of {} (d={}, seed {})",
        config.total_epochs(),
        ds.d(),
        config.seed
    );
    if let Some(last) = outcome.log.last() {
        println!("final loss {:.5}", last.loss);
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn print_reports(rows: &[MetricsReport]) {
    println!("adapter       t     shd  dci_d   dci_c   acc     align");
    for r in rows {
        let t = r.t.map_or("-".to_string(), |t| format!("{t:.1}"));
        println!(
            "{:<12} {:>4} {:>5}  {:.4}  {:.4}  {:.4}  {:.4}",
            r.adapter, t, r.shd, r.dci_d, r.dci_c, r.intervention_accuracy, r.alignment_score
        );
        for n in &r.notes {
            println!("  note: {n}");
        }
    }
}

fn evaluate_cmd(a: EvaluateArgs, root: &Path) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut options = load_eval_options(a.eval_config.as_deref())?;
    options.split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mode = EvalMode::from(a.mode);
    let rows = match a.adapter {
        AdapterArg::Model => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| HarnessError::config("--checkpoint is required with --adapter model"))?;
            let ckpt = load_checkpoint(path)?;
            evaluate_checkpoint(&ckpt, &ds, mode, &options)?
        }
        AdapterArg::GroundTruth => evaluate(LatentAdapter::GroundTruth, &ds, mode, &options)?,
        AdapterArg::Random => evaluate(LatentAdapter::Random { seed: a.random_seed }, &ds, mode, &options)?,
    };
    let out = match (a.out, &a.checkpoint, a.adapter) {
        (Some(p), _, _) => p,
        (None, Some(c), AdapterArg::Model) => c.with_file_name(metrics_file(mode)),
        (None, _, adapter) => {
            let name = a.data.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned());
            let adapter = format!("{adapter:?}").to_lowercase();
            root.join("eval").join(name).join(format!("{adapter}_{}", metrics_file(mode)))
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    write_metrics(&out, &rows)?;
    print_reports(&rows);
    println!("metrics: {}", out.display());
    Ok(())
}

fn matrix_cmd(a: MatrixArgs, root: &Path) -> Result<()> {
    let config = ExperimentConfig::load(&a.config, root)?;
    let exe = std::env::current_exe().map_err(|e| HarnessError::Runtime(format!("locating executable: {e}")))?;
    let summary = run_matrix(&config, &Runner::Subprocess { exe, jobs: a.jobs })?;
    println!(
        "{} cells: {} run, {} cached",
        summary.executed.len() + summary.skipped.len(),
        summary.executed.len(),
        summary.skipped.len()
    );
    for t in &summary.record.aggregate {
        println!("table: {}", config.output_dir.join(t).display());
    }
    println!("plots: {}", summary.record.plots.len());
    Ok(())
}

fn plot_cmd(a: PlotArgs, root: &Path) -> Result<()> {
    let (files, default_out) = match &a.matrix {
        Some(dir) => {
            let record: crate::record::MatrixRecord = read_json(&dir.join(crate::record::MATRIX_RECORD_FILE))?;
            let mut files = Vec::new();
            for rel in &record.cells {
                let path = dir.join(rel);
                let r: crate::record::RunRecord = read_json(&path)?;
                if r.status == crate::record::CellStatus::Completed {
                    let cell_dir = path.parent().unwrap_or(dir);
                    files.extend(r.metrics.iter().map(|m| cell_dir.join(m)));
                }
            }
            (files, dir.clone())
        }
        None => (a.metrics.clone(), root.join("plots")),
    };
    let out = a.out.unwrap_or(default_out);
    let p = plot_metrics(&files, &out)?;
    for t in p.tables.iter().chain(&p.plots) {
        println!("{}", t.display());
    }
    Ok(())
}

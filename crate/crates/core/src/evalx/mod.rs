//! Evaluation: alignment of learned latents to ground-truth factors, DCI
//! scores, interventional structure learning over inferred latents, SHD and
//! intervention-inference accuracy, for single-point and per-timestep
//! representations.

pub mod align;
pub mod dci;
pub mod enco;
pub mod shd;

pub use align::{align_latents, Alignment};
pub use dci::{dci_from_importance, dci_scores, DciConfig, DciResult};
pub use enco::{enco_learn, EncoConfig, LearnedGraph};
pub use shd::{permute_adjacency, shd, ShdMode};

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::TargetSampling;
use crate::error::{Error, Result};
use crate::latent_scm::extract_causal_variables;
use crate::scmgen::{PairDataset, Split};
use crate::trainer::{config_hash, gather, Checkpoint, DcrlModel};

/// Number of evenly spaced timesteps in a trajectory evaluation.
pub const TRAJECTORY_STEPS: usize = 11;

pub fn trajectory_times() -> Vec<f64> {
    (0..TRAJECTORY_STEPS).map(|k| k as f64 / 10.0).collect()
}

/// Encoder input used when inferring latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodingMode {
    Single,
    Timestep { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Single,
    Trajectory,
}

/// Which latent representation the structure learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    #[default]
    Causal,
    Noise,
}

/// Inferred latents for every pair of a split, in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPairs {
    pub z: Array2<f64>,
    pub z_tilde: Array2<f64>,
    pub e: Array2<f64>,
    pub e_tilde: Array2<f64>,
    pub targets: Vec<usize>,
}

fn to_array(t: &candle_core::Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Ok(
        Array2::from_shape_vec((r, c), t.flatten_all()?.to_vec1::<f64>()?)
            .expect("shape from tensor"),
    )
}

fn split_rows(dataset: &PairDataset, split: Split, max_pairs: Option<usize>) -> Vec<usize> {
    dataset
        .rows(split)
        .take(max_pairs.unwrap_or(usize::MAX))
        .collect()
}

/// Encodes each pair with posterior means (at time `t` in timestep mode),
/// takes the most probable target and maps both encodings through the
/// solution flows.
pub fn infer_latent_dataset(
    model: &DcrlModel,
    dataset: &PairDataset,
    split: Split,
    mode: EncodingMode,
) -> Result<LatentPairs> {
    infer_rows(model, dataset, &split_rows(dataset, split, None), mode)
}

fn infer_rows(
    model: &DcrlModel,
    dataset: &PairDataset,
    rows: &[usize],
    mode: EncodingMode,
) -> Result<LatentPairs> {
    if model.d != dataset.d() {
        return Err(Error::invalid(format!(
            "model has d={} but dataset has d={}",
            model.d,
            dataset.d()
        )));
    }
    if let EncodingMode::Timestep { t } = mode {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
        }
    }
    let d = model.d;
    let n = rows.len();
    let mut out = LatentPairs {
        z: Array2::zeros((n, d)),
        z_tilde: Array2::zeros((n, d)),
        e: Array2::zeros((n, d)),
        e_tilde: Array2::zeros((n, d)),
        targets: Vec::with_capacity(n),
    };
    let mut start = 0;
    for chunk in rows.chunks(512) {
        let x = gather(&dataset.x, chunk)?;
        let xt = gather(&dataset.x_tilde, chunk)?;
        let times = match mode {
            EncodingMode::Single => None,
            EncodingMode::Timestep { t } => Some(vec![t; chunk.len()]),
        };
        let enc = model.encoding.sample_encoded_pair(
            &x,
            &xt,
            times.as_deref(),
            TargetSampling::Argmax,
            None,
        )?;
        let z = extract_causal_variables(&model.flow, &enc.e)?;
        let zt = extract_causal_variables(&model.flow, &enc.e_tilde)?;
        let end = start + chunk.len();
        for (dst, src) in [
            (&mut out.z, &z),
            (&mut out.z_tilde, &zt),
            (&mut out.e, &enc.e),
            (&mut out.e_tilde, &enc.e_tilde),
        ] {
            dst.slice_mut(ndarray::s![start..end, ..])
                .assign(&to_array(src)?);
        }
        out.targets.extend(enc.targets);
        start = end;
    }
    if out
        .z
        .iter()
        .chain(out.z_tilde.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            component: "inferred latents".into(),
        });
    }
    Ok(out)
}

/// Source of latents to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum LatentAdapter<'a> {
    Model(&'a DcrlModel),
    /// The dataset's own latents and true targets.
    GroundTruth,
    /// Independent standard-normal latents and uniform random targets.
    Random {
        seed: u64,
    },
}

impl LatentAdapter<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LatentAdapter::Model(_) => "model",
            LatentAdapter::GroundTruth => "ground_truth",
            LatentAdapter::Random { .. } => "random",
        }
    }

    pub fn infer(
        &self,
        dataset: &PairDataset,
        rows: &[usize],
        mode: EncodingMode,
    ) -> Result<LatentPairs> {
        let d = dataset.d();
        match self {
            LatentAdapter::Model(m) => infer_rows(m, dataset, rows, mode),
            LatentAdapter::GroundTruth => Ok(LatentPairs {
                z: PairDataset::select(&dataset.z, rows),
                z_tilde: PairDataset::select(&dataset.z_tilde, rows),
                e: PairDataset::select(&dataset.eps, rows),
                e_tilde: PairDataset::select(&dataset.eps_tilde, rows),
                targets: rows.iter().map(|&r| dataset.targets[r]).collect(),
            }),
            LatentAdapter::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = rows.len();
                let z =
                    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
                let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
                let mut z_tilde = z.clone();
                for (r, &t) in targets.iter().enumerate() {
                    z_tilde[[r, t]] = rng.sample(StandardNormal);
                }
                Ok(LatentPairs {
                    e: z.clone(),
                    e_tilde: z_tilde.clone(),
                    z,
                    z_tilde,
                    targets,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    pub max_pairs: Option<usize>,
    pub dci: DciConfig,
    pub enco: EncoConfig,
    pub shd_mode: ShdMode,
    pub latent_source: LatentSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            max_pairs: None,
            dci: DciConfig::default(),
            enco: EncoConfig::default(),
            shd_mode: ShdMode::default(),
            latent_source: LatentSource::default(),
        }
    }
}

/// One evaluation row (per seed x d x mode x timestep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub adapter: String,
    pub seed: u64,
    pub d: usize,
    pub config_hash: Option<String>,
    pub mode: EvalMode,
    pub t: Option<f64>,
    pub n_pairs: usize,
    pub shd: usize,
    pub dci_d: f64,
    pub dci_c: f64,
    pub intervention_accuracy: f64,
    pub alignment_score: f64,
    pub learned_edges: usize,
    pub true_edges: usize,
    pub notes: Vec<String>,
}

/// Metrics for one set of inferred latents against the dataset's ground truth.
pub fn score_latents(
    pairs: &LatentPairs,
    dataset: &PairDataset,
    rows: &[usize],
    options: &EvalOptions,
) -> Result<ScoredLatents> {
    let factors = PairDataset::select(&dataset.z, rows);
    let alignment = align_latents(pairs.z.view(), factors.view())?;
    let mut notes = Vec::new();
    if !alignment.constant_latents.is_empty() {
        notes.push(format!(
            "constant latent columns {:?}",
            alignment.constant_latents
        ));
    }
    let dci = dci_scores(pairs.z.view(), factors.view(), &options.dci)?;
    notes.extend(dci.warnings.iter().cloned());
    let (pre, post): (ArrayView2<f64>, ArrayView2<f64>) = match options.latent_source {
        LatentSource::Causal => (pairs.z.view(), pairs.z_tilde.view()),
        LatentSource::Noise => (pairs.e.view(), pairs.e_tilde.view()),
    };
    let d = dataset.d();
    let learned = match enco_learn(pre, post, &pairs.targets, &options.enco) {
        Ok(g) => g.adjacency,
        Err(Error::InsufficientCoverage { nodes, min_count }) => {
            notes.push(format!(
                "inferred targets cover nodes {nodes:?} fewer than {min_count} times; empty graph reported"
            ));
            vec![vec![0; d]; d]
        }
        Err(e) => return Err(e),
    };
    let aligned = permute_adjacency(&learned, &alignment.perm);
    let truth = &dataset.scm.graph.adjacency;
    let shd_value = shd(&aligned, truth, options.shd_mode)?;
    let correct = pairs
        .targets
        .iter()
        .zip(rows)
        .filter(|(&t, &r)| alignment.factor_of(t) == Some(dataset.targets[r]))
        .count();
    Ok(ScoredLatents {
        shd: shd_value,
        dci,
        intervention_accuracy: correct as f64 / rows.len().max(1) as f64,
        learned_edges: learned.iter().flatten().filter(|&&v| v == 1).count(),
        aligned_adjacency: aligned,
        alignment,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLatents {
    pub shd: usize,
    pub dci: DciResult,
    pub intervention_accuracy: f64,
    pub learned_edges: usize,
    pub aligned_adjacency: Vec<Vec<u8>>,
    pub alignment: Alignment,
    pub notes: Vec<String>,
}

/// Evaluates an adapter on a dataset split; trajectory mode yields one row
/// per timestep `t = 0.0, 0.1, ..., 1.0`.
pub fn evaluate(
    adapter: LatentAdapter<'_>,
    dataset: &PairDataset,
    mode: EvalMode,
    options: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    let rows = split_rows(dataset, options.split, options.max_pairs);
    if rows.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let (seed, hash) = match adapter {
        LatentAdapter::Model(m) => (m.config.seed, Some(config_hash(&m.config, m.d)?)),
        LatentAdapter::Random { seed } => (seed, None),
        LatentAdapter::GroundTruth => (dataset.config.seed, None),
    };
    let modes: Vec<(EncodingMode, Option<f64>)> = match mode {
        EvalMode::Single => vec![(EncodingMode::Single, None)],
        EvalMode::Trajectory => trajectory_times()
            .into_iter()
            .map(|t| (EncodingMode::Timestep { t }, Some(t)))
            .collect(),
    };
    let mut reports = Vec::with_capacity(modes.len());
    for (enc_mode, t) in modes {
        let pairs = adapter.infer(dataset, &rows, enc_mode)?;
        let scored = score_latents(&pairs, dataset, &rows, options)?;
        reports.push(MetricsReport {
            adapter: adapter.name().to_string(),
            seed,
            d: dataset.d(),
            config_hash: hash.clone(),
            mode,
            t,
            n_pairs: rows.len(),
            shd: scored.shd,
            dci_d: scored.dci.disentanglement,
            dci_c: scored.dci.completeness,
            intervention_accuracy: scored.intervention_accuracy,
            alignment_score: scored.alignment.mean_score(),
            learned_edges: scored.learned_edges,
            true_edges: dataset.scm.graph.edge_count(),
            notes: scored.notes,
        });
    }
    Ok(reports)
}

/// Rebuilds the model stored in `ckpt` and evaluates it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &PairDataset,
    mode: EvalMode,
    options: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    if ckpt.meta.d != dataset.d() {
        return Err(Error::invalid(format!(
            "checkpoint has d={} but dataset has d={}",
            ckpt.meta.d,
            dataset.d()
        )));
    }
    let model = DcrlModel::from_checkpoint(ckpt)?;
    evaluate(LatentAdapter::Model(&model), dataset, mode, options)
}

pub fn write_metrics(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

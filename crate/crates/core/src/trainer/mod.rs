//! Joint model, ELBO-derived losses, entropy regularizer, beta annealing and
//! the three-phase training loop.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{
    draw_gumbel, EncodedPair, EncoderConfig, EncodingModule, InterventionModule, NoiseEncoder,
    ProjectionNoise, TargetSampling,
};
use crate::error::{Error, Result};
use crate::latent_scm::{prior_log_density_batch, PriorConfig, SolutionFlow};
use crate::nn::{self, Adam, AdamConfig, NamedTensor, ParamStore};
use crate::scmgen::{PairDataset, Split, OBS_DIM};
use crate::sde::{
    draw_normal, draw_times, score_residual, InputLayout, ScoreNetConfig, ScoreNetwork, VeSchedule,
    Weighting,
};

/// Which sign the entropy term takes in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `sum q log q` (negative entropy): minimizing the loss spreads the
    /// aggregate intervention posterior.
    #[default]
    NegativeEntropy,
    /// `-sum q log q`, the opposite direction.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    /// 0 in phase 1, 1 in phase 2, linear 0 -> 1 across phase 3.
    #[default]
    Linear,
    /// 0 in phase 1, `value` afterwards.
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreArch {
    pub width: usize,
    pub n_blocks: usize,
    pub emb_dim: usize,
    pub layout: InputLayout,
    pub grid_channels: usize,
}

impl Default for ScoreArch {
    fn default() -> Self {
        let c = ScoreNetConfig::default();
        ScoreArch {
            width: c.width,
            n_blocks: c.n_blocks,
            emb_dim: c.emb_dim,
            layout: c.layout,
            grid_channels: c.grid_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub phase_epochs: [usize; 3],
    pub beta_schedule: BetaSchedule,
    pub weighting: Weighting,
    /// Condition the encoder on diffusion time (trajectory representations).
    pub time_dependent: bool,
    pub seed: u64,
    pub entropy_sign: EntropySign,
    pub entropy_coef: f64,
    /// First phase (1-based) in which the entropy term is added.
    pub entropy_from_phase: u8,
    pub phase2_support_bound: f64,
    pub schedule: VeSchedule,
    pub score_net: ScoreArch,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub flow_hidden: usize,
    /// Validation pairs scored after every epoch (0 disables).
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 64,
            phase_epochs: [20, 50, 50],
            beta_schedule: BetaSchedule::Linear,
            weighting: Weighting::Likelihood,
            time_dependent: false,
            seed: 0,
            entropy_sign: EntropySign::NegativeEntropy,
            entropy_coef: 1.0,
            entropy_from_phase: 2,
            phase2_support_bound: 10.0,
            schedule: VeSchedule::default(),
            score_net: ScoreArch::default(),
            encoder_hidden: 64,
            encoder_layers: 2,
            flow_hidden: 64,
            val_pairs: 1000,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule for single-machine runs.
    pub fn desk() -> Self {
        TrainConfig {
            phase_epochs: [5, 10, 10],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.phase_epochs.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!(
                "every phase needs at least one epoch, got {:?}",
                self.phase_epochs
            )));
        }
        if !(1..=4).contains(&self.entropy_from_phase) {
            return Err(Error::invalid(
                "entropy_from_phase must be in 1..=4 (4 disables)",
            ));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::invalid("entropy_coef must be non-negative"));
        }
        if let BetaSchedule::Fixed { value } = self.beta_schedule {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::invalid("fixed beta must lie in [0, 1]"));
            }
        }
        VeSchedule::new(self.schedule.sigma_min, self.schedule.sigma_max)?;
        crate::latent_scm::uniform_density_stub(self.phase2_support_bound)?;
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phase_epochs.iter().sum()
    }

    /// `(phase, epoch within phase)` of a global epoch index; phases are 1-based.
    pub fn locate(&self, global_epoch: usize) -> Option<(u8, usize)> {
        let mut start = 0;
        for (p, &n) in self.phase_epochs.iter().enumerate() {
            if global_epoch < start + n {
                return Some((p as u8 + 1, global_epoch - start));
            }
            start += n;
        }
        None
    }

    pub fn score_config(&self, d: usize) -> ScoreNetConfig {
        ScoreNetConfig {
            obs_dim: OBS_DIM,
            cond_dim: Some(d),
            width: self.score_net.width,
            n_blocks: self.score_net.n_blocks,
            emb_dim: self.score_net.emb_dim,
            layout: self.score_net.layout,
            grid_channels: self.score_net.grid_channels,
        }
    }

    pub fn encoder_config(&self, d: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: self.encoder_hidden,
            layers: self.encoder_layers,
            time_dependent: self.time_dependent,
            ..EncoderConfig::new(d)
        }
    }
}

/// Hex sha256 of the canonical JSON of `(d, config)`.
pub fn config_hash(config: &TrainConfig, d: usize) -> Result<String> {
    let value = serde_json::json!({ "d": d, "train": config });
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&value)?);
    Ok(hex::encode(h.finalize()))
}

/// `beta` for a phase (1-based) and epoch within that phase.
pub fn beta_schedule(phase: u8, epoch: usize, config: &TrainConfig) -> Result<f64> {
    let n = match phase {
        1..=3 => config.phase_epochs[phase as usize - 1],
        _ => return Err(Error::invalid(format!("phase {phase} out of range"))),
    };
    if epoch >= n {
        return Err(Error::invalid(format!(
            "epoch {epoch} beyond phase length {n}"
        )));
    }
    Ok(match (phase, config.beta_schedule) {
        (1, _) => 0.0,
        (_, BetaSchedule::Fixed { value }) => value,
        (2, BetaSchedule::Linear) => 1.0,
        (_, BetaSchedule::Linear) if n == 1 => 1.0,
        (_, BetaSchedule::Linear) => epoch as f64 / (n - 1) as f64,
    })
}

/// `sum_I qbar(I) ln qbar(I)` of the batch-mean posterior `qbar`, or its
/// negation under [`EntropySign::Literal`]. `probs` is `(B, d)`.
pub fn entropy_regularizer(probs: &Tensor, sign: EntropySign) -> Result<Tensor> {
    let (b, _) = probs.dims2()?;
    if b == 0 {
        return Err(Error::invalid("entropy of an empty batch"));
    }
    let qbar = probs.mean(0)?;
    let neg_h = (&qbar * qbar.maximum(1e-300)?.log()?)?.sum_all()?;
    Ok(match sign {
        EntropySign::NegativeEntropy => neg_h,
        EntropySign::Literal => neg_h.neg()?,
    })
}

/// Score network, encoder, intervention module and solution flows sharing
/// one parameter store. Parameter names are prefixed `score.`, `encoder.`,
/// `intervention.` and `flow.`.
#[derive(Debug)]
pub struct DcrlModel {
    pub d: usize,
    pub config: TrainConfig,
    pub store: ParamStore,
    pub score: ScoreNetwork,
    pub encoding: EncodingModule,
    pub flow: SolutionFlow,
}

impl DcrlModel {
    pub fn new<R: Rng + ?Sized>(d: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if d == 0 {
            return Err(Error::invalid("d must be positive"));
        }
        let mut store = ParamStore::new();
        let score = ScoreNetwork::new(
            &mut store,
            "score",
            config.score_config(d),
            config.schedule,
            rng,
        )?;
        let encoder = NoiseEncoder::new(&mut store, "encoder", config.encoder_config(d), rng)?;
        let intervention = InterventionModule::new(&mut store, "intervention", rng)?;
        let flow = SolutionFlow::new(&mut store, "flow", d, config.flow_hidden, rng)?;
        Ok(DcrlModel {
            d,
            config: config.clone(),
            store,
            score,
            encoding: EncodingModule {
                encoder,
                intervention,
            },
            flow,
        })
    }

    /// Rebuilds the model described by a checkpoint and loads its parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.meta.config.seed);
        let model = DcrlModel::new(ckpt.meta.d, &ckpt.meta.config, &mut rng)?;
        model.store.load(&ckpt.params)?;
        Ok(model)
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.store.snapshot()
    }
}

/// Which encoder inputs the latent pair is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Encoder sees only `x`.
    Single,
    /// Encoder sees `(x, t)` at the same `t` used to perturb the pair.
    Infinite,
}

/// All randomness consumed by one loss evaluation.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub t: Vec<f64>,
    pub eta_x: Tensor,
    pub eta_xt: Tensor,
    pub projection: ProjectionNoise,
    pub gumbel: Vec<f64>,
}

impl BatchNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, b: usize, d: usize, obs_dim: usize) -> Result<Self> {
        let t = draw_times(rng, b);
        let eta_x = nn::matrix(b, obs_dim, draw_normal(rng, b, obs_dim))?;
        let eta_xt = nn::matrix(b, obs_dim, draw_normal(rng, b, obs_dim))?;
        let projection = ProjectionNoise::draw(rng, b, d)?;
        let gumbel = draw_gumbel(rng, b * d);
        Ok(BatchNoise {
            t,
            eta_x,
            eta_xt,
            projection,
            gumbel,
        })
    }
}

/// Batch-mean loss components. `total` carries the autodiff graph.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub diffusion_x: f64,
    pub diffusion_xt: f64,
    /// `-log p(I) - log p(e) - log p(e_tilde | e, I)`
    pub prior: f64,
    /// `log q(I | x, x_tilde) + log q(e, e_tilde | x, x_tilde, I)`
    pub posterior: f64,
    pub beta: f64,
    pub encoded: EncodedPair,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_scalar::<f64>()?)
    }
}

fn check_batch(
    model: &DcrlModel,
    x: &Tensor,
    x_tilde: &Tensor,
    noise: &BatchNoise,
) -> Result<usize> {
    let (b, dim) = x.dims2()?;
    if x_tilde.dims() != [b, dim] || dim != OBS_DIM {
        return Err(Error::ShapeMismatch {
            name: "observation pair batch".into(),
            expected: vec![b, OBS_DIM],
            found: x_tilde.dims().to_vec(),
        });
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if noise.t.len() != b || noise.gumbel.len() != b * model.d {
        return Err(Error::invalid("noise does not match batch size"));
    }
    Ok(b)
}

/// Model loss with all randomness supplied: diffusion terms for `x` and
/// `x_tilde` conditioned on the projected latents, plus `beta` times the
/// negative latent ELBO terms.
pub fn model_loss_with_noise(
    model: &DcrlModel,
    x: &Tensor,
    x_tilde: &Tensor,
    noise: &BatchNoise,
    beta: f64,
    prior: PriorConfig,
    mode: LossMode,
) -> Result<LossBreakdown> {
    check_batch(model, x, x_tilde, noise)?;
    let t_enc = match mode {
        LossMode::Single => None,
        LossMode::Infinite => {
            if !model.encoding.encoder.is_time_dependent() {
                return Err(Error::invalid(
                    "infinite mode needs a time-dependent encoder",
                ));
            }
            Some(noise.t.as_slice())
        }
    };
    let enc = model.encoding.sample_encoded_pair(
        x,
        x_tilde,
        t_enc,
        TargetSampling::StraightThrough(&noise.gumbel),
        Some(&noise.projection),
    )?;
    let sched = &model.config.schedule;
    let w = model.config.weighting;
    let dx = score_residual(
        &model.score,
        sched,
        w,
        x,
        Some(&enc.e),
        &noise.t,
        &noise.eta_x,
    )?;
    let dxt = score_residual(
        &model.score,
        sched,
        w,
        x_tilde,
        Some(&enc.e_tilde),
        &noise.t,
        &noise.eta_xt,
    )?;
    let log_p = prior_log_density_batch(&enc.e, &enc.e_tilde, &enc.mask, prior, &model.flow)?;
    let prior_term = log_p.neg()?.mean_all()?;
    let posterior_term = (&enc.log_q_target + &enc.log_q_latent)?.mean_all()?;
    let mut total = (&dx + &dxt)?;
    if beta != 0.0 {
        total = (total + ((&prior_term + &posterior_term)? * beta)?)?;
    }
    Ok(LossBreakdown {
        diffusion_x: dx.to_scalar()?,
        diffusion_xt: dxt.to_scalar()?,
        prior: prior_term.to_scalar()?,
        posterior: posterior_term.to_scalar()?,
        total,
        beta,
        encoded: enc,
    })
}

pub fn model_loss_single<R: Rng + ?Sized>(
    model: &DcrlModel,
    x: &Tensor,
    x_tilde: &Tensor,
    beta: f64,
    prior: PriorConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = BatchNoise::draw(rng, x.dim(0)?, model.d, OBS_DIM)?;
    model_loss_with_noise(model, x, x_tilde, &noise, beta, prior, LossMode::Single)
}

pub fn model_loss_infinite<R: Rng + ?Sized>(
    model: &DcrlModel,
    x: &Tensor,
    x_tilde: &Tensor,
    beta: f64,
    prior: PriorConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = BatchNoise::draw(rng, x.dim(0)?, model.d, OBS_DIM)?;
    model_loss_with_noise(model, x, x_tilde, &noise, beta, prior, LossMode::Infinite)
}

/// Per-phase settings derived from the config.
#[derive(Debug, Clone, Copy)]
pub struct PhaseSettings {
    pub phase: u8,
    pub beta: f64,
    pub prior: PriorConfig,
    pub entropy: bool,
    pub train_flow: bool,
}

impl PhaseSettings {
    pub fn new(config: &TrainConfig, phase: u8, epoch: usize) -> Result<Self> {
        Ok(PhaseSettings {
            phase,
            beta: beta_schedule(phase, epoch, config)?,
            prior: if phase >= 3 {
                PriorConfig::Flow
            } else {
                PriorConfig::Uniform {
                    bound: config.phase2_support_bound,
                }
            },
            entropy: phase >= config.entropy_from_phase && config.entropy_coef > 0.0,
            train_flow: phase >= 3,
        })
    }

    pub fn mode(config: &TrainConfig) -> LossMode {
        if config.time_dependent {
            LossMode::Infinite
        } else {
            LossMode::Single
        }
    }
}

/// One step's loss: model loss plus the entropy term when enabled.
pub fn training_loss(
    model: &DcrlModel,
    x: &Tensor,
    x_tilde: &Tensor,
    noise: &BatchNoise,
    settings: &PhaseSettings,
) -> Result<(LossBreakdown, f64, Tensor)> {
    let mode = PhaseSettings::mode(&model.config);
    let lb = model_loss_with_noise(
        model,
        x,
        x_tilde,
        noise,
        settings.beta,
        settings.prior,
        mode,
    )?;
    let ent = entropy_regularizer(&lb.encoded.q_i.probs()?, model.config.entropy_sign)?;
    let ent_value = ent.to_scalar::<f64>()?;
    let total = if settings.entropy {
        (&lb.total + (ent * model.config.entropy_coef)?)?
    } else {
        lb.total.clone()
    };
    Ok((lb, ent_value, total))
}

/// Line-delimited record written after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub global_epoch: usize,
    pub beta: f64,
    pub steps: usize,
    pub loss: f64,
    pub diffusion_x: f64,
    pub diffusion_xt: f64,
    pub prior: f64,
    pub posterior: f64,
    pub entropy: f64,
    /// Total loss of the epoch's first batch, before its update.
    pub first_batch_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Directory for the log and the per-epoch checkpoint.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many global epochs are complete.
    pub stop_after: Option<usize>,
    /// Checksum of the training dataset, recorded in checkpoints.
    pub dataset_checksum: Option<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DcrlModel,
    pub log: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

pub(crate) fn gather(a: &Array2<f64>, rows: &[usize]) -> Result<Tensor> {
    let cols = a.ncols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend(a.row(r).iter());
    }
    nn::matrix(rows.len(), cols, data)
}

fn ensure_finite(v: f64, what: &str, phase: u8, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: format!("{what} (phase {phase}, epoch {epoch}, step {step})"),
        })
    }
}

fn validation_loss(
    model: &DcrlModel,
    dataset: &PairDataset,
    settings: &PhaseSettings,
    global_epoch: usize,
) -> Result<Option<f64>> {
    let rows: Vec<usize> = dataset
        .rows(Split::Val)
        .take(model.config.val_pairs)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        model.config.seed ^ (0x9e37_79b9_7f4a_7c15 ^ global_epoch as u64),
    );
    let mut acc = 0.0;
    for chunk in rows.chunks(model.config.batch_size) {
        let x = gather(&dataset.x, chunk)?;
        let xt = gather(&dataset.x_tilde, chunk)?;
        let noise = BatchNoise::draw(&mut rng, chunk.len(), model.d, OBS_DIM)?;
        let (_, _, total) = training_loss(model, &x, &xt, &noise, settings)?;
        acc += total.detach().to_scalar::<f64>()? * chunk.len() as f64;
    }
    Ok(Some(acc / rows.len() as f64))
}

/// Runs (or resumes) the three-phase schedule. With `out_dir` set, appends
/// one JSON line per epoch to `train_log.jsonl` and atomically rewrites
/// `checkpoint.ckpt` after every epoch.
pub fn train(
    dataset: &PairDataset,
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let d = dataset.d();
    let hash = config_hash(config, d)?;
    let (model, mut adam, mut rng, start) = match &options.resume {
        Some(ckpt) => {
            ckpt.verify(config, d)?;
            let model = DcrlModel::from_checkpoint(ckpt)?;
            let adam = Adam::import(
                AdamConfig {
                    lr: config.lr,
                    ..Default::default()
                },
                &ckpt.meta.adam_steps,
                &ckpt.optimizer,
            )?;
            (model, adam, ckpt.meta.rng.clone(), ckpt.meta.next_epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model = DcrlModel::new(d, config, &mut rng)?;
            let adam = Adam::new(AdamConfig {
                lr: config.lr,
                ..Default::default()
            });
            (model, adam, rng, 0)
        }
    };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if start == 0 {
            let path = dir.join(LOG_FILE);
            fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
        }
    }

    let train_rows: Vec<usize> = dataset.rows(Split::Train).collect();
    if train_rows.is_empty() {
        return Err(Error::invalid("dataset has no training pairs"));
    }
    let end = options
        .stop_after
        .unwrap_or(usize::MAX)
        .min(config.total_epochs());
    let mut log = Vec::new();
    let mut last = None;
    for global in start..end {
        let (phase, epoch) = config.locate(global).expect("within total epochs");
        let settings = PhaseSettings::new(config, phase, epoch)?;
        let clock = Instant::now();
        let mut order = train_rows.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut first = f64::NAN;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = gather(&dataset.x, chunk)?;
            let xt = gather(&dataset.x_tilde, chunk)?;
            let noise = BatchNoise::draw(&mut rng, chunk.len(), d, OBS_DIM)?;
            let (lb, ent, total) = training_loss(&model, &x, &xt, &noise, &settings)?;
            let value = total.to_scalar::<f64>()?;
            for (what, v) in [
                ("total loss", value),
                ("diffusion loss (x)", lb.diffusion_x),
                ("diffusion loss (x_tilde)", lb.diffusion_xt),
                ("prior term", lb.prior),
                ("posterior term", lb.posterior),
            ] {
                ensure_finite(v, what, phase, epoch, step)?;
            }
            if step == 0 {
                first = value;
            }
            let grads = total.backward()?;
            let train_flow = settings.train_flow;
            adam.step(&model.store, &grads, |name| {
                train_flow || !name.starts_with("flow.")
            })?;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                value,
                lb.diffusion_x,
                lb.diffusion_xt,
                lb.prior,
                lb.posterior,
                ent,
            ]) {
                *s += v * w;
            }
            steps += 1;
        }
        let n = order.len() as f64;
        let val_loss = if config.val_pairs > 0 {
            validation_loss(&model, dataset, &settings, global)?
        } else {
            None
        };
        let record = EpochRecord {
            phase,
            epoch,
            global_epoch: global,
            beta: settings.beta,
            steps,
            loss: sums[0] / n,
            diffusion_x: sums[1] / n,
            diffusion_xt: sums[2] / n,
            prior: sums[3] / n,
            posterior: sums[4] / n,
            entropy: sums[5] / n,
            first_batch_loss: first,
            val_loss,
            wall_time_s: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "phase {phase} epoch {epoch}: loss {:.4} (val {:?})",
            record.loss,
            record.val_loss
        );
        let ckpt = Checkpoint::capture(
            &model,
            &adam,
            &rng,
            global + 1,
            hash.clone(),
            options.dataset_checksum.clone(),
        )?;
        if let Some(dir) = &options.out_dir {
            append_log(&dir.join(LOG_FILE), &record)?;
            save_checkpoint(&ckpt, dir.join(CHECKPOINT_FILE))?;
        }
        log.push(record);
        last = Some(ckpt);
    }
    let checkpoint = match last {
        Some(c) => c,
        None => Checkpoint::capture(
            &model,
            &adam,
            &rng,
            start,
            hash,
            options.dataset_checksum.clone(),
        )?,
    };
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a training log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests;

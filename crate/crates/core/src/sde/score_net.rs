use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ScoreModel, VeSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputLayout {
    /// The observation is reshaped to a square single-channel grid and passed
    /// through a 3x3 convolution stem.
    Grid,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub obs_dim: usize,
    /// Length of the conditioning vector; `None` builds an unconditional net.
    pub cond_dim: Option<usize>,
    pub width: usize,
    pub n_blocks: usize,
    pub emb_dim: usize,
    pub layout: InputLayout,
    pub grid_channels: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            obs_dim: 16,
            cond_dim: None,
            width: 128,
            n_blocks: 2,
            emb_dim: 32,
            layout: InputLayout::Grid,
            grid_channels: 8,
        }
    }
}

impl ScoreNetConfig {
    pub fn conditional(cond_dim: usize) -> Self {
        ScoreNetConfig {
            cond_dim: Some(cond_dim),
            ..Default::default()
        }
    }

    fn grid_side(&self) -> Option<usize> {
        let side = (self.obs_dim as f64).sqrt().round() as usize;
        (side * side == self.obs_dim).then_some(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.width == 0 || self.emb_dim < 2 {
            return Err(Error::invalid("score net dimensions must be positive"));
        }
        if self.cond_dim == Some(0) {
            return Err(Error::invalid("cond_dim must be positive when present"));
        }
        if self.layout == InputLayout::Grid
            && (self.grid_side().is_none() || self.grid_channels == 0)
        {
            return Err(Error::invalid(format!(
                "grid layout needs a square obs_dim, got {}",
                self.obs_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    inner: Linear,
    film: Linear,
    outer: Linear,
}

#[derive(Debug, Clone)]
enum Stem {
    Grid {
        kernel: Tensor,
        bias: Tensor,
        proj: Linear,
        side: usize,
    },
    Flat(Linear),
}

/// Residual MLP score model `s(u, e, t)` with sinusoidal time embedding and
/// feature-wise (scale, shift) modulation by the time/conditioning context.
/// The raw output is divided by `sigma(t)`.
#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub config: ScoreNetConfig,
    schedule: VeSchedule,
    stem: Stem,
    time: Linear,
    cond: Option<Linear>,
    blocks: Vec<Block>,
    out: Linear,
}

impl ScoreNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: ScoreNetConfig,
        schedule: VeSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let stem = match config.layout {
            InputLayout::Grid => {
                let side = config.grid_side().expect("validated");
                let c = config.grid_channels;
                let bound = 1.0 / 3.0;
                Stem::Grid {
                    kernel: store.var(
                        &format!("{prefix}.stem.kernel"),
                        &[c, 1, 3, 3],
                        nn::Init::Uniform(bound),
                        rng,
                    )?,
                    bias: store.var(
                        &format!("{prefix}.stem.bias"),
                        &[c],
                        nn::Init::Uniform(bound),
                        rng,
                    )?,
                    proj: Linear::new(
                        store,
                        &format!("{prefix}.stem.proj"),
                        c * config.obs_dim,
                        w,
                        rng,
                    )?,
                    side,
                }
            }
            InputLayout::Flat => Stem::Flat(Linear::new(
                store,
                &format!("{prefix}.stem"),
                config.obs_dim,
                w,
                rng,
            )?),
        };
        let time = Linear::new(store, &format!("{prefix}.time"), config.emb_dim, w, rng)?;
        let cond = match config.cond_dim {
            Some(c) => Some(Linear::new(store, &format!("{prefix}.cond"), c, w, rng)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("{prefix}.block{b}");
            blocks.push(Block {
                inner: Linear::new(store, &format!("{p}.inner"), w, w, rng)?,
                film: Linear::with_init(
                    store,
                    &format!("{p}.film"),
                    w,
                    2 * w,
                    nn::Init::Uniform(0.1 / (w as f64).sqrt()),
                    nn::Init::Zeros,
                    rng,
                )?,
                outer: Linear::new(store, &format!("{p}.outer"), w, w, rng)?,
            });
        }
        let out = Linear::new(store, &format!("{prefix}.out"), w, config.obs_dim, rng)?;
        Ok(ScoreNetwork {
            config,
            schedule,
            stem,
            time,
            cond,
            blocks,
            out,
        })
    }

    fn stem_forward(&self, u: &Tensor) -> Result<Tensor> {
        match &self.stem {
            Stem::Flat(l) => l.forward(u),
            Stem::Grid {
                kernel,
                bias,
                proj,
                side,
            } => {
                let b = u.dim(0)?;
                let grid = u.reshape((b, 1, *side, *side))?;
                let c = kernel.dim(0)?;
                let h = grid
                    .conv2d(kernel, 1, 1, 1, 1)?
                    .broadcast_add(&bias.reshape((1, c, 1, 1))?)?
                    .silu()?;
                proj.forward(&h.flatten_from(1)?)
            }
        }
    }
}

impl ScoreModel for ScoreNetwork {
    fn score(&self, u: &Tensor, cond: Option<&Tensor>, t: &[f64]) -> Result<Tensor> {
        let (b, dim) = u.dims2()?;
        if dim != self.config.obs_dim || t.len() != b {
            return Err(Error::ShapeMismatch {
                name: "score input".into(),
                expected: vec![t.len(), self.config.obs_dim],
                found: vec![b, dim],
            });
        }
        let mut ctx = self
            .time
            .forward(&nn::time_embedding(t, self.config.emb_dim)?)?;
        if let (Some(c), Some(layer)) = (cond, &self.cond) {
            let expected = self.config.cond_dim.unwrap_or(0);
            if c.dims() != [b, expected] {
                return Err(Error::ShapeMismatch {
                    name: "conditioning vector".into(),
                    expected: vec![b, expected],
                    found: c.dims().to_vec(),
                });
            }
            ctx = (ctx + layer.forward(c)?)?;
        } else if cond.is_some() {
            return Err(Error::invalid(
                "conditioning given to an unconditional score net",
            ));
        }
        let ctx = ctx.silu()?;
        let w = self.config.width;
        let mut h = self.stem_forward(u)?;
        for block in &self.blocks {
            let a = block.inner.forward(&h.silu()?)?;
            let film = block.film.forward(&ctx)?;
            let scale = film.narrow(D::Minus1, 0, w)?;
            let shift = film.narrow(D::Minus1, w, w)?;
            let a = ((a * (scale + 1.0)?)? + shift)?;
            let a = block.outer.forward(&a.silu()?)?;
            h = (h + a)?;
        }
        let raw = self.out.forward(&h.silu()?)?;
        let sig: Vec<f64> = t
            .iter()
            .map(|&ti| self.schedule.sigma_unchecked(ti))
            .collect();
        Ok(raw.broadcast_div(&nn::column(&sig)?)?)
    }

    fn cond_dim(&self) -> Option<usize> {
        self.config.cond_dim
    }
}

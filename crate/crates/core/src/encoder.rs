//! Stochastic noise encoder, heuristic intervention posterior and the pair
//! projection that makes off-target latent coordinates coincide.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore};
use crate::sde::draw_normal;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Feed a sinusoidal embedding of the diffusion time alongside `x`.
    pub time_dependent: bool,
    pub emb_dim: usize,
}

impl EncoderConfig {
    pub fn new(d: usize) -> Self {
        EncoderConfig {
            d,
            obs_dim: 16,
            hidden: 64,
            layers: 2,
            time_dependent: false,
            emb_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.obs_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Batch of diagonal Gaussians, each tensor `(B, d)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_std: Tensor,
}

impl GaussianPosterior {
    pub fn from_vecs(mu: &[f64], log_std: &[f64]) -> Result<Self> {
        let d = mu.len();
        Ok(GaussianPosterior {
            mu: nn::matrix(1, d, mu.to_vec())?,
            log_std: nn::matrix(1, d, log_std.to_vec())?,
        })
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.log_std.exp()?)
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        Ok(self.mu.dims2()?)
    }
}

/// Categorical posterior over the intervention target, `(B, d)` log-probs.
#[derive(Debug, Clone)]
pub struct InterventionPosterior {
    pub log_probs: Tensor,
}

impl InterventionPosterior {
    pub fn probs(&self) -> Result<Tensor> {
        Ok(self.log_probs.exp()?)
    }

    pub fn argmax(&self) -> Result<Vec<usize>> {
        let rows = self.log_probs.to_vec2::<f64>()?;
        Ok(rows.iter().map(|r| argmax(r)).collect())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Unnormalized per-component scores `alpha + beta |dmu| + gamma |dmu|^2`,
/// normalized by a softmax over components.
pub fn intervention_logits(
    mu_x: &Tensor,
    mu_xt: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
) -> Result<InterventionPosterior> {
    if mu_x.dims() != mu_xt.dims() {
        return Err(Error::ShapeMismatch {
            name: "posterior means".into(),
            expected: mu_x.dims().to_vec(),
            found: mu_xt.dims().to_vec(),
        });
    }
    let (_, d) = mu_x.dims2()?;
    if d == 0 {
        return Err(Error::invalid(
            "intervention posterior over zero components",
        ));
    }
    let delta = (mu_x - mu_xt)?.abs()?;
    let scores = delta
        .broadcast_mul(beta)?
        .broadcast_add(&delta.sqr()?.broadcast_mul(gamma)?)?
        .broadcast_add(alpha)?;
    Ok(InterventionPosterior {
        log_probs: candle_nn::ops::log_softmax(&scores, D::Minus1)?,
    })
}

/// Standard-normal draws used by one projection, each `(B, d)`.
#[derive(Debug, Clone)]
pub struct ProjectionNoise {
    pub shared: Tensor,
    pub pre: Tensor,
    pub post: Tensor,
}

impl ProjectionNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, b: usize, d: usize) -> Result<Self> {
        Ok(ProjectionNoise {
            shared: nn::matrix(b, d, draw_normal(rng, b, d))?,
            pre: nn::matrix(b, d, draw_normal(rng, b, d))?,
            post: nn::matrix(b, d, draw_normal(rng, b, d))?,
        })
    }

    pub fn zeros(b: usize, d: usize) -> Result<Self> {
        let z = nn::matrix(b, d, vec![0.0; b * d])?;
        Ok(ProjectionNoise {
            shared: z.clone(),
            pre: z.clone(),
            post: z,
        })
    }
}

/// Output of [`project_with_mask`].
#[derive(Debug, Clone)]
pub struct ProjectedPair {
    pub e: Tensor,
    pub e_tilde: Tensor,
    /// `log q(e, e_tilde | x, x_tilde, I)` per row, shape `(B,)`.
    pub log_density: Tensor,
}

fn gaussian_log_density_from_noise(noise: &Tensor, log_std: &Tensor) -> Result<Tensor> {
    // log N(m + s n; m, s) = -n^2/2 - log s - log sqrt(2 pi)
    Ok(((noise.sqr()? * -0.5)? - log_std)?.affine(1.0, -HALF_LOG_2PI)?)
}

/// Reparameterized projection. `mask` is `(B, d)` with exactly one 1 per row
/// in the forward pass (it may carry straight-through gradients). Off-target
/// coordinates of `e` and `e_tilde` receive the same sample from the
/// precision-weighted fusion of both posteriors; the target coordinate is
/// sampled independently from each posterior.
pub fn project_with_mask(
    post_x: &GaussianPosterior,
    post_xt: &GaussianPosterior,
    mask: &Tensor,
    noise: &ProjectionNoise,
) -> Result<ProjectedPair> {
    let var_x = (&post_x.log_std * 2.0)?.exp()?;
    let var_xt = (&post_xt.log_std * 2.0)?.exp()?;
    let prec_x = var_x.recip()?;
    let prec_xt = var_xt.recip()?;
    let fused_var = (&prec_x + &prec_xt)?.recip()?;
    let fused_mu = (((&post_x.mu * &prec_x)? + (&post_xt.mu * &prec_xt)?)? * &fused_var)?;
    let fused_log_std = (fused_var.log()? * 0.5)?;
    let shared = (&fused_mu + (fused_log_std.exp()? * &noise.shared)?)?;
    let pre = (&post_x.mu + (post_x.std()? * &noise.pre)?)?;
    let post = (&post_xt.mu + (post_xt.std()? * &noise.post)?)?;

    let keep = mask.affine(-1.0, 1.0)?;
    let e = ((mask * &pre)? + (&keep * &shared)?)?;
    let e_tilde = ((mask * &post)? + (&keep * &shared)?)?;

    let lq_shared = gaussian_log_density_from_noise(&noise.shared, &fused_log_std)?;
    let lq_target = (gaussian_log_density_from_noise(&noise.pre, &post_x.log_std)?
        + gaussian_log_density_from_noise(&noise.post, &post_xt.log_std)?)?;
    let log_density = ((mask * lq_target)? + (keep * lq_shared)?)?.sum(1)?;
    Ok(ProjectedPair {
        e,
        e_tilde,
        log_density,
    })
}

pub fn one_hot(targets: &[usize], d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * d];
    for (r, &t) in targets.iter().enumerate() {
        if t >= d {
            return Err(Error::invalid(format!("target {t} out of range for d={d}")));
        }
        data[r * d + t] = 1.0;
    }
    nn::matrix(targets.len(), d, data)
}

/// Projects a batch of posterior pairs for known targets.
pub fn project_pair<R: Rng + ?Sized>(
    post_x: &GaussianPosterior,
    post_xt: &GaussianPosterior,
    targets: &[usize],
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (b, d) = post_x.dims()?;
    if post_xt.dims()? != (b, d) || targets.len() != b {
        return Err(Error::invalid("posterior batch shapes disagree"));
    }
    let mask = one_hot(targets, d)?;
    let noise = ProjectionNoise::draw(rng, b, d)?;
    let p = project_with_mask(post_x, post_xt, &mask, &noise)?;
    Ok((p.e, p.e_tilde))
}

/// Gaussian noise encoder `q(e | x)` (optionally `q(e | x, t)`): an MLP with
/// ReLU hidden layers emitting `(mu, log_std)`.
#[derive(Debug, Clone)]
pub struct NoiseEncoder {
    pub config: EncoderConfig,
    input: Linear,
    time: Option<Linear>,
    hidden: Vec<Linear>,
    head: Linear,
}

impl NoiseEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let input = Linear::new(store, &format!("{prefix}.input"), config.obs_dim, h, rng)?;
        let time = if config.time_dependent {
            let bound = 1.0 / ((config.obs_dim + config.emb_dim) as f64).sqrt();
            Some(Linear::with_init(
                store,
                &format!("{prefix}.time"),
                config.emb_dim,
                h,
                Init::Uniform(bound),
                Init::Zeros,
                rng,
            )?)
        } else {
            None
        };
        let hidden = (1..config.layers)
            .map(|k| Linear::new(store, &format!("{prefix}.hidden{k}"), h, h, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, &format!("{prefix}.head"), h, 2 * config.d, rng)?;
        Ok(NoiseEncoder {
            config,
            input,
            time,
            hidden,
            head,
        })
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time.is_some()
    }

    /// Encodes `x` of shape `(B, obs_dim)`. Without `t` the time path is
    /// skipped; a time-independent encoder ignores `t`.
    pub fn encode(&self, x: &Tensor, t: Option<&[f64]>) -> Result<GaussianPosterior> {
        let (b, dim) = x.dims2()?;
        if dim != self.config.obs_dim {
            return Err(Error::ShapeMismatch {
                name: "encoder input".into(),
                expected: vec![b, self.config.obs_dim],
                found: vec![b, dim],
            });
        }
        if !x
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                component: "encoder input".into(),
            });
        }
        let mut h = self.input.forward(x)?;
        if let (Some(time), Some(t)) = (&self.time, t) {
            if t.len() != b {
                return Err(Error::invalid("one time per row required"));
            }
            h = (h + time.forward(&nn::time_embedding(t, self.config.emb_dim)?)?)?;
        }
        h = h.relu()?;
        for layer in &self.hidden {
            h = layer.forward(&h)?.relu()?;
        }
        let out = self.head.forward(&h)?;
        let d = self.config.d;
        Ok(GaussianPosterior {
            mu: out.narrow(1, 0, d)?,
            log_std: out.narrow(1, d, d)?,
        })
    }

    /// Sets the weights so that `mu(x) = map . x` exactly and
    /// `log_std = log_std_value`, using a positive/negative ReLU split.
    /// Needs `hidden >= 2 d`; time weights are zeroed.
    pub fn set_linear_map(&self, map: &Array2<f64>, log_std_value: f64) -> Result<()> {
        let d = self.config.d;
        let h = self.config.hidden;
        let obs = self.config.obs_dim;
        if map.dim() != (d, obs) {
            return Err(Error::ShapeMismatch {
                name: "linear map".into(),
                expected: vec![d, obs],
                found: map.shape().to_vec(),
            });
        }
        if h < 2 * d {
            return Err(Error::invalid("hidden width must be at least 2 d"));
        }
        let mut w_in = vec![0.0; obs * h];
        for i in 0..d {
            for k in 0..obs {
                w_in[k * h + i] = map[[i, k]];
                w_in[k * h + d + i] = -map[[i, k]];
            }
        }
        set(&self.input.weight, w_in)?;
        set(&self.input.bias, vec![0.0; h])?;
        if let Some(time) = &self.time {
            set(&time.weight, vec![0.0; self.config.emb_dim * h])?;
            set(&time.bias, vec![0.0; h])?;
        }
        for layer in &self.hidden {
            let mut w = vec![0.0; h * h];
            for i in 0..2 * d {
                w[i * h + i] = 1.0;
            }
            set(&layer.weight, w)?;
            set(&layer.bias, vec![0.0; h])?;
        }
        let mut w_out = vec![0.0; h * 2 * d];
        for i in 0..d {
            w_out[i * 2 * d + i] = 1.0;
            w_out[(d + i) * 2 * d + i] = -1.0;
        }
        set(&self.head.weight, w_out)?;
        let mut bias = vec![0.0; 2 * d];
        bias[d..].iter_mut().for_each(|b| *b = log_std_value);
        set(&self.head.bias, bias)?;
        Ok(())
    }

    pub fn time_layer(&self) -> Option<&Linear> {
        self.time.as_ref()
    }
}

fn set(t: &Tensor, data: Vec<f64>) -> Result<()> {
    let src = Tensor::from_vec(data, t.dims(), &nn::device())?;
    // Vars share storage with the tensors handed out by the store.
    t.slice_set(&src, 0, 0)?;
    Ok(())
}

/// Learnable scalars of the heuristic intervention posterior.
#[derive(Debug, Clone)]
pub struct InterventionModule {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
}

impl InterventionModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Ok(InterventionModule {
            alpha: store.var(&format!("{prefix}.alpha"), &[1], Init::Const(0.0), rng)?,
            beta: store.var(&format!("{prefix}.beta"), &[1], Init::Const(1.0), rng)?,
            gamma: store.var(&format!("{prefix}.gamma"), &[1], Init::Const(1.0), rng)?,
        })
    }

    pub fn posterior(&self, mu_x: &Tensor, mu_xt: &Tensor) -> Result<InterventionPosterior> {
        intervention_logits(mu_x, mu_xt, &self.alpha, &self.beta, &self.gamma)
    }
}

/// How the intervention target is chosen from `q(I | x, x_tilde)`.
#[derive(Debug, Clone, Copy)]
pub enum TargetSampling<'a> {
    /// Gumbel-max sample with straight-through gradients; one Gumbel draw per
    /// `(row, component)`, row-major.
    StraightThrough(&'a [f64]),
    Argmax,
}

pub fn draw_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Everything produced by encoding one batch of pairs.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub post_x: GaussianPosterior,
    pub post_xt: GaussianPosterior,
    pub q_i: InterventionPosterior,
    pub e: Tensor,
    pub e_tilde: Tensor,
    pub targets: Vec<usize>,
    /// Straight-through one-hot of `targets`, `(B, d)`.
    pub mask: Tensor,
    /// `log q(e, e_tilde | x, x_tilde, I)`, `(B,)`.
    pub log_q_latent: Tensor,
    /// `log q(I | x, x_tilde)` of the chosen target, `(B,)`.
    pub log_q_target: Tensor,
}

/// Encoder plus intervention module.
#[derive(Debug, Clone)]
pub struct EncodingModule {
    pub encoder: NoiseEncoder,
    pub intervention: InterventionModule,
}

impl EncodingModule {
    /// Encodes both elements (time-conditioned when `t` is given), infers the
    /// target posterior from the means, picks a target and projects.
    /// `noise = None` projects posterior means.
    pub fn sample_encoded_pair(
        &self,
        x: &Tensor,
        x_tilde: &Tensor,
        t: Option<&[f64]>,
        sampling: TargetSampling<'_>,
        noise: Option<&ProjectionNoise>,
    ) -> Result<EncodedPair> {
        let post_x = self.encoder.encode(x, t)?;
        let post_xt = self.encoder.encode(x_tilde, t)?;
        let q_i = self.intervention.posterior(&post_x.mu, &post_xt.mu)?;
        let (b, d) = post_x.dims()?;
        let (targets, mask) = match sampling {
            TargetSampling::Argmax => {
                let targets = q_i.argmax()?;
                let mask = one_hot(&targets, d)?;
                (targets, mask)
            }
            TargetSampling::StraightThrough(gumbel) => {
                if gumbel.len() != b * d {
                    return Err(Error::invalid(
                        "one Gumbel draw per (row, component) required",
                    ));
                }
                let lp = q_i.log_probs.to_vec2::<f64>()?;
                let targets: Vec<usize> = lp
                    .iter()
                    .enumerate()
                    .map(|(r, row)| {
                        let perturbed: Vec<f64> = row
                            .iter()
                            .zip(&gumbel[r * d..(r + 1) * d])
                            .map(|(a, g)| a + g)
                            .collect();
                        argmax(&perturbed)
                    })
                    .collect();
                let hard = one_hot(&targets, d)?;
                let probs = q_i.probs()?;
                // forward value is exactly `hard`; gradients flow through `probs`
                let mask = (hard + (&probs - probs.detach())?)?;
                (targets, mask)
            }
        };
        let owned_zero;
        let noise = match noise {
            Some(n) => n,
            None => {
                owned_zero = ProjectionNoise::zeros(b, d)?;
                &owned_zero
            }
        };
        let projected = project_with_mask(&post_x, &post_xt, &mask, noise)?;
        let log_q_target = (&mask * &q_i.log_probs)?.sum(1)?;
        Ok(EncodedPair {
            post_x,
            post_xt,
            q_i,
            e: projected.e,
            e_tilde: projected.e_tilde,
            targets,
            mask,
            log_q_latent: projected.log_density,
            log_q_target,
        })
    }
}

/// `log N(v; mu, exp(log_std)^2)` for plain scalars.
pub fn normal_log_density(v: f64, mu: f64, log_std: f64) -> f64 {
    let z = (v - mu) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

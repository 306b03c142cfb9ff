//! Latent prior over noise encodings and the conditional affine solution
//! flows `h_i(e_i; e_{-i})` that map noise to causal variables.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// How the post-intervention density `p(e_tilde_I | e)` is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    /// Uniform on `[-bound, bound]`, used before the flows are trained.
    Uniform {
        bound: f64,
    },
    Flow,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Flow
    }
}

/// Log density of the uniform stand-in on `[-bound, bound]`.
pub fn uniform_density_stub(bound: f64) -> Result<f64> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::invalid("uniform support bound must be positive"));
    }
    Ok(-(2.0 * bound).ln())
}

/// `d` conditional affine flows evaluated in one batched pass. Component
/// `i`'s conditioner is a one-hidden-layer MLP fed with `e` where `e_i` is
/// masked to zero, returning a location `m_i` and log-scale `l_i`.
#[derive(Debug, Clone)]
pub struct SolutionFlow {
    pub d: usize,
    pub hidden: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    mask: Tensor,
}

impl SolutionFlow {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("flow dimensions must be positive"));
        }
        let b_in = 1.0 / (d as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        // last layer starts near zero so every flow begins close to identity
        Ok(SolutionFlow {
            d,
            hidden,
            w1: store.var(
                &format!("{prefix}.w1"),
                &[d, d, hidden],
                Init::Uniform(b_in),
                rng,
            )?,
            b1: store.var(
                &format!("{prefix}.b1"),
                &[d, 1, hidden],
                Init::Uniform(b_in),
                rng,
            )?,
            w2: store.var(
                &format!("{prefix}.w2"),
                &[d, hidden, 2],
                Init::Uniform(0.01 * b_hid),
                rng,
            )?,
            b2: store.var(&format!("{prefix}.b2"), &[d, 1, 2], Init::Zeros, rng)?,
            mask: Self::mask(d)?,
        })
    }

    /// Flows with fixed zero parameters: `h_i(v) = v`. Not registered in any store.
    pub fn identity(d: usize, hidden: usize) -> Result<Self> {
        Self::constant(d, hidden, 0.0, 0.0)
    }

    /// Flows whose conditioners ignore context and return constant `(m, l)`.
    pub fn constant(d: usize, hidden: usize, m: f64, l: f64) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("flow dimensions must be positive"));
        }
        let dev = nn::device();
        let b2: Vec<f64> = (0..d).flat_map(|_| [m, l]).collect();
        Ok(SolutionFlow {
            d,
            hidden,
            w1: Tensor::zeros((d, d, hidden), nn::DTYPE, &dev)?,
            b1: Tensor::zeros((d, 1, hidden), nn::DTYPE, &dev)?,
            w2: Tensor::zeros((d, hidden, 2), nn::DTYPE, &dev)?,
            b2: Tensor::from_vec(b2, (d, 1, 2), &dev)?,
            mask: Self::mask(d)?,
        })
    }

    fn mask(d: usize) -> Result<Tensor> {
        let mut m = vec![1.0; d * d];
        for i in 0..d {
            m[i * d + i] = 0.0;
        }
        Ok(Tensor::from_vec(m, (d, 1, d), &nn::device())?)
    }

    fn check(&self, name: &str, t: &Tensor) -> Result<usize> {
        let (b, d) = t.dims2()?;
        if d != self.d {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: vec![b, self.d],
                found: vec![b, d],
            });
        }
        Ok(b)
    }

    /// Conditioner outputs `(m, l)`, each `(B, d)`, for context `e` `(B, d)`.
    pub fn conditioner(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.check("flow context", e)?;
        let d = self.d;
        let ctx = e.unsqueeze(0)?.broadcast_mul(&self.mask)?;
        let h = ctx.matmul(&self.w1)?.broadcast_add(&self.b1)?.relu()?;
        let out = h.matmul(&self.w2)?.broadcast_add(&self.b2)?;
        let m = out.narrow(2, 0, 1)?.reshape((d, b))?.t()?;
        let l = out.narrow(2, 1, 1)?.reshape((d, b))?.t()?;
        Ok((m, l))
    }

    /// `h_i(v_i; e_{-i}) = (v_i - m_i) exp(-l_i)` for every component.
    pub fn forward(&self, v: &Tensor, e: &Tensor) -> Result<Tensor> {
        self.check("flow input", v)?;
        let (m, l) = self.conditioner(e)?;
        Ok(((v - m)? * l.neg()?.exp()?)?)
    }

    pub fn inverse(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        self.check("flow input", z)?;
        let (m, l) = self.conditioner(e)?;
        Ok(((z * l.exp()?)? + m)?)
    }

    /// Per-component `log p(v_i | e_{-i})`, `(B, d)`: standard normal base
    /// pushed through the inverse flow.
    pub fn log_density(&self, v: &Tensor, e: &Tensor) -> Result<Tensor> {
        self.check("flow input", v)?;
        let (m, l) = self.conditioner(e)?;
        let h = ((v - m)? * l.neg()?.exp()?)?;
        Ok(((h.sqr()? * -0.5)? - l)?.affine(1.0, -HALF_LOG_2PI)?)
    }

    /// Scalar convenience: `log p(value | e_{-i})` for component `i`.
    pub fn flow_log_density(&self, i: usize, value: f64, e: &[f64]) -> Result<f64> {
        if i >= self.d || e.len() != self.d {
            return Err(Error::invalid("component or context out of range"));
        }
        let mut v = e.to_vec();
        v[i] = value;
        let ctx = nn::matrix(1, self.d, e.to_vec())?;
        let lp = self.log_density(&nn::matrix(1, self.d, v)?, &ctx)?;
        Ok(lp.to_vec2::<f64>()?[0][i])
    }
}

/// Causal variables `z_i = h_i(e_i; e_{-i})` from noise encodings.
pub fn extract_causal_variables(flow: &SolutionFlow, e: &Tensor) -> Result<Tensor> {
    flow.forward(e, e)
}

fn std_normal_sum(e: &Tensor) -> Result<Tensor> {
    Ok((e.sqr()? * -0.5)?.affine(1.0, -HALF_LOG_2PI)?.sum(1)?)
}

/// Batched `log p(e, e_tilde, I)`, `(B,)`, with `mask` the `(B, d)` target
/// one-hot. Off-target equality is a contract of the caller and is not
/// re-checked here (the Dirac factors are dropped).
pub fn prior_log_density_batch(
    e: &Tensor,
    e_tilde: &Tensor,
    mask: &Tensor,
    prior: PriorConfig,
    flow: &SolutionFlow,
) -> Result<Tensor> {
    let (_, d) = e.dims2()?;
    let log_p_i = -(d as f64).ln();
    let base = std_normal_sum(e)?;
    let post = match prior {
        PriorConfig::Uniform { bound } => {
            let c = uniform_density_stub(bound)?;
            (mask.sum(1)? * c)?
        }
        PriorConfig::Flow => (flow.log_density(e_tilde, e)? * mask)?.sum(1)?,
    };
    Ok((base + post)?.affine(1.0, log_p_i)?)
}

/// `log p(e, e_tilde, I = target)` for one sample. Returns a contract error
/// when an off-target coordinate of the pair differs by more than `1e-9`.
pub fn prior_log_density(
    e: &[f64],
    e_tilde: &[f64],
    target: usize,
    prior: PriorConfig,
    flow: &SolutionFlow,
) -> Result<f64> {
    let d = e.len();
    if d == 0 || e_tilde.len() != d || target >= d || flow.d != d {
        return Err(Error::invalid("inconsistent prior arguments"));
    }
    for i in (0..d).filter(|&i| i != target) {
        if (e[i] - e_tilde[i]).abs() > 1e-9 {
            return Err(Error::ContractViolation(format!(
                "off-target component {i} differs: {} vs {}",
                e[i], e_tilde[i]
            )));
        }
    }
    let mut mask = vec![0.0; d];
    mask[target] = 1.0;
    let lp = prior_log_density_batch(
        &nn::matrix(1, d, e.to_vec())?,
        &nn::matrix(1, d, e_tilde.to_vec())?,
        &nn::matrix(1, d, mask)?,
        prior,
        flow,
    )?;
    Ok(lp.to_vec1::<f64>()?[0])
}

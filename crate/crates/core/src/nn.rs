//! Small neural-network toolkit on top of candle: a named parameter store with
//! seeded initialization, dense layers, time embeddings and an Adam optimizer
//! whose state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// U(-bound, bound)
    Uniform(f64),
}

/// A flat tensor with its name and shape, used for checkpoint I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Ok(NamedTensor {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_vec1::<f64>()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            self.shape.as_slice(),
            &device(),
        )?)
    }
}

/// Ordered collection of trainable variables keyed by dotted names.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(k, v)| NamedTensor::from_tensor(k, v.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, var) in &self.vars {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            let expected = var.as_tensor().dims().to_vec();
            if t.shape != expected {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected,
                    found: t.shape.clone(),
                });
            }
            var.set(&t.to_tensor()?)?;
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// PyTorch-style default initialization, U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(
            store,
            name,
            fan_in,
            fan_out,
            Init::Uniform(bound),
            Init::Uniform(bound),
            rng,
        )
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.var(&format!("{name}.weight"), &[fan_in, fan_out], weight, rng)?,
            bias: store.var(&format!("{name}.bias"), &[fan_out], bias, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Sinusoidal embedding of times in [0, 1], shape `(B, dim)`.
pub fn time_embedding(t: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let scaled = 1000.0 * ti;
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((scaled * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((scaled * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &device())?)
}

pub fn column(values: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, (values.len(), 1), &device())?)
}

pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &device())?)
}

pub fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    step: u64,
    m: Tensor,
    v: Tensor,
}

/// Adam with per-parameter step counts, so parameter groups that join
/// training late get correct bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter whose name passes `active`.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        active: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (name, var) in store.iter() {
            if !active(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // moments must not keep the step's autograd graph alive
            let g = g.detach();
            let entry = match self.state.get_mut(name) {
                Some(e) => e,
                None => {
                    let zeros = var.as_tensor().zeros_like()?;
                    self.state.entry(name.clone()).or_insert(Moments {
                        step: 0,
                        m: zeros.clone(),
                        v: zeros,
                    })
                }
            };
            entry.step += 1;
            entry.m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let bc1 = 1.0 - beta1.powi(entry.step as i32);
            let bc2 = 1.0 - beta2.powi(entry.step as i32);
            let m_hat = (&entry.m / bc1)?;
            let v_hat = (&entry.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    /// Flattens the optimizer state as `(steps, tensors)`.
    pub fn export(&self) -> Result<(BTreeMap<String, u64>, Vec<NamedTensor>)> {
        let mut steps = BTreeMap::new();
        let mut tensors = Vec::new();
        for (name, s) in &self.state {
            steps.insert(name.clone(), s.step);
            tensors.push(NamedTensor::from_tensor(&format!("adam.m.{name}"), &s.m)?);
            tensors.push(NamedTensor::from_tensor(&format!("adam.v.{name}"), &s.v)?);
        }
        Ok((steps, tensors))
    }

    pub fn import(
        config: AdamConfig,
        steps: &BTreeMap<String, u64>,
        tensors: &[NamedTensor],
    ) -> Result<Self> {
        let find = |key: String| -> Result<Tensor> {
            tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::invalid(format!("missing optimizer tensor `{key}`")))?
                .to_tensor()
        };
        let mut state = BTreeMap::new();
        for (name, &step) in steps {
            state.insert(
                name.clone(),
                Moments {
                    step,
                    m: find(format!("adam.m.{name}"))?,
                    v: find(format!("adam.v.{name}"))?,
                },
            );
        }
        Ok(Adam { config, state })
    }
}

/// Largest relative error between autodiff and central finite differences
/// over `probes` random entries of every parameter whose name starts with
/// `prefix`. Entries with both gradients below `floor` are skipped.
pub fn gradient_check<R: Rng + ?Sized>(
    store: &ParamStore,
    prefix: &str,
    loss: impl Fn() -> Result<Tensor>,
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let grads = loss()?.backward()?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, var) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let shape = var.as_tensor().dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        for _ in 0..probes.min(base.len()) {
            let k = rng.random_range(0..base.len());
            let at = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &device())?)?;
                scalar_value(&loss()?)
            };
            let numeric = (at(h)? - at(-h)?) / (2.0 * h);
            var.set(&Tensor::from_vec(
                base.clone(),
                shape.as_slice(),
                &device(),
            )?)?;
            let scale = analytic[k].abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            checked += 1;
            let rel = (analytic[k] - numeric).abs() / scale;
            if rel > worst {
                log::debug!("{name}[{k}]: autodiff {} vs numeric {numeric}", analytic[k]);
            }
            worst = worst.max(rel);
        }
    }
    if checked == 0 {
        return Err(Error::invalid(format!(
            "no parameters with nonzero gradient under `{prefix}`"
        )));
    }
    Ok(worst)
}

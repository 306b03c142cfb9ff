//! Variance-exploding diffusion: schedule, perturbation kernel, (conditional)
//! denoising score matching and an Euler-Maruyama reverse sampler.

mod score_net;

pub use score_net::{InputLayout, ScoreNetConfig, ScoreNetwork};

use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

/// Lower bound for sampled diffusion times; the kernel degenerates at t = 0.
pub const T_FLOOR: f64 = 1e-5;

/// `sigma(t) = sigma_min * (sigma_max / sigma_min)^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for VeSchedule {
    fn default() -> Self {
        VeSchedule {
            sigma_min: 0.01,
            sigma_max: 50.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("time {t} outside [0, 1]")))
    }
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        Ok(VeSchedule {
            sigma_min,
            sigma_max,
        })
    }

    pub fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * (self.log_ratio() * t).exp()
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    /// Variance of the perturbation kernel, `sigma^2(t) - sigma^2(0)`.
    pub fn kernel_var(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        let s = self.sigma_unchecked(t);
        Ok(s * s - self.sigma_min * self.sigma_min)
    }

    pub fn marginal_std(&self, t: f64) -> Result<f64> {
        Ok(self.kernel_var(t)?.max(0.0).sqrt())
    }

    /// Likelihood weighting `2 sigma^2(t) ln(sigma_max / sigma_min)`; equal to
    /// the squared diffusion coefficient `d sigma^2 / dt`.
    pub fn lambda_weight(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t)?;
        Ok(2.0 * s * s * self.log_ratio())
    }

    pub fn diffusion_sq(&self, t: f64) -> Result<f64> {
        self.lambda_weight(t)
    }
}

/// Per-time weight applied to the squared score residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `lambda(t) = 2 sigma^2(t) ln(sigma_max / sigma_min)`
    #[default]
    Likelihood,
    /// `lambda(t) = sigma^2(t)`
    SigmaSquared,
}

impl Weighting {
    pub fn weight(&self, schedule: &VeSchedule, t: f64) -> Result<f64> {
        match self {
            Weighting::Likelihood => schedule.lambda_weight(t),
            Weighting::SigmaSquared => Ok(schedule.sigma(t)?.powi(2)),
        }
    }
}

/// A score model `s(u_t, e, t)`; `cond` is absent in unconditional mode.
pub trait ScoreModel {
    fn score(&self, u: &Tensor, cond: Option<&Tensor>, t: &[f64]) -> Result<Tensor>;

    /// Expected conditioning length, when the model checks it.
    fn cond_dim(&self) -> Option<usize> {
        None
    }
}

impl<F> ScoreModel for F
where
    F: Fn(&Tensor, Option<&Tensor>, &[f64]) -> Result<Tensor>,
{
    fn score(&self, u: &Tensor, cond: Option<&Tensor>, t: &[f64]) -> Result<Tensor> {
        self(u, cond, t)
    }
}

/// Produces the conditioning vector `E(x0)` or `E(x0, t)`.
pub trait ConditionEncoder {
    fn encode_condition(&self, x0: &Tensor, t: Option<&[f64]>) -> Result<Tensor>;
}

impl<F> ConditionEncoder for F
where
    F: Fn(&Tensor, Option<&[f64]>) -> Result<Tensor>,
{
    fn encode_condition(&self, x0: &Tensor, t: Option<&[f64]>) -> Result<Tensor> {
        self(x0, t)
    }
}

pub fn draw_times<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(T_FLOOR..=1.0)).collect()
}

pub fn draw_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    nn::matrix(rows, cols, draw_normal(rng, rows, cols))
}

/// Perturbs `x0` with injected standard noise `eta`:
/// returns `x_t = x0 + std(t) eta` and the kernel score `-(x_t - x0) / var(t)`.
pub fn perturb(
    schedule: &VeSchedule,
    x0: &Tensor,
    t: &[f64],
    eta: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut std = Vec::with_capacity(t.len());
    let mut var = Vec::with_capacity(t.len());
    for &ti in t {
        if !(ti > 0.0) {
            return Err(Error::invalid(
                "perturbation at t = 0 has a zero-variance kernel",
            ));
        }
        var.push(schedule.kernel_var(ti)?);
        std.push(schedule.marginal_std(ti)?);
    }
    if x0.dims() != eta.dims() || x0.dim(0)? != t.len() {
        return Err(Error::ShapeMismatch {
            name: "x0/eta".into(),
            expected: x0.dims().to_vec(),
            found: eta.dims().to_vec(),
        });
    }
    let offset = eta.broadcast_mul(&nn::column(&std)?)?;
    let xt = (x0 + &offset)?;
    let score = offset.broadcast_div(&nn::column(&var)?)?.neg()?;
    Ok((xt, score))
}

pub fn perturb_rng<R: Rng + ?Sized>(
    schedule: &VeSchedule,
    x0: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (b, dim) = x0.dims2()?;
    let eta = normal_tensor(rng, b, dim)?;
    perturb(schedule, x0, t, &eta)
}

/// Mean over the batch of `lambda(t) ||s(x_t, cond, t) - grad log p(x_t | x0)||^2`.
pub fn score_residual<M: ScoreModel + ?Sized>(
    net: &M,
    schedule: &VeSchedule,
    weighting: Weighting,
    x0: &Tensor,
    cond: Option<&Tensor>,
    t: &[f64],
    eta: &Tensor,
) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (xt, target) = perturb(schedule, x0, t, eta)?;
    let s = net.score(&xt, cond, t)?;
    let weights = t
        .iter()
        .map(|&ti| weighting.weight(schedule, ti))
        .collect::<Result<Vec<_>>>()?;
    let per_sample = (s - target)?.sqr()?.sum_keepdim(1)?;
    Ok(per_sample.mul(&nn::column(&weights)?)?.mean_all()?)
}

/// Unconditional denoising score matching loss with explicit noise.
pub fn dsm_loss<M: ScoreModel + ?Sized>(
    net: &M,
    schedule: &VeSchedule,
    weighting: Weighting,
    x0: &Tensor,
    t: &[f64],
    eta: &Tensor,
) -> Result<Tensor> {
    score_residual(net, schedule, weighting, x0, None, t, eta)
}

pub fn dsm_loss_rng<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    net: &M,
    schedule: &VeSchedule,
    weighting: Weighting,
    x0: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let (b, dim) = x0.dims2()?;
    let eta = normal_tensor(rng, b, dim)?;
    dsm_loss(net, schedule, weighting, x0, t, &eta)
}

/// Conditional denoising score matching: the score net sees `E(x0)` or, when
/// `time_dependent`, `E(x0, t)`.
#[allow(clippy::too_many_arguments)]
pub fn cdsm_loss<M: ScoreModel + ?Sized, E: ConditionEncoder + ?Sized>(
    net: &M,
    encoder: &E,
    schedule: &VeSchedule,
    weighting: Weighting,
    x0: &Tensor,
    t: &[f64],
    eta: &Tensor,
    time_dependent: bool,
) -> Result<Tensor> {
    let cond = encoder.encode_condition(x0, time_dependent.then_some(t))?;
    if let Some(expected) = net.cond_dim() {
        if cond.dims() != [t.len(), expected] {
            return Err(Error::ShapeMismatch {
                name: "conditioning vector".into(),
                expected: vec![t.len(), expected],
                found: cond.dims().to_vec(),
            });
        }
    }
    score_residual(net, schedule, weighting, x0, Some(&cond), t, eta)
}

#[allow(clippy::too_many_arguments)]
pub fn cdsm_loss_rng<M: ScoreModel + ?Sized, E: ConditionEncoder + ?Sized, R: Rng + ?Sized>(
    net: &M,
    encoder: &E,
    schedule: &VeSchedule,
    weighting: Weighting,
    x0: &Tensor,
    t: &[f64],
    time_dependent: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let (b, dim) = x0.dims2()?;
    let eta = normal_tensor(rng, b, dim)?;
    cdsm_loss(
        net,
        encoder,
        schedule,
        weighting,
        x0,
        t,
        &eta,
        time_dependent,
    )
}

/// Euler-Maruyama integration of the reverse-time SDE
/// `dx = -g^2(t) s(x, e, t) dt + g(t) dw` from t = 1 down to `T_FLOOR`.
/// Returns `n_samples x obs_dim`; `cond`, when given, has one row per sample.
pub fn reverse_sde_sample<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    net: &M,
    schedule: &VeSchedule,
    cond: Option<&Tensor>,
    obs_dim: usize,
    n_samples: usize,
    n_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n_steps < 1 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let sigma_max = schedule.sigma(1.0)?;
    let mut x = (normal_tensor(rng, n_samples, obs_dim)? * sigma_max)?;
    let dt = (1.0 - T_FLOOR) / n_steps as f64;
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let g2 = schedule.diffusion_sq(t)?;
        let times = vec![t; n_samples];
        let s = net.score(&x, cond, &times)?;
        x = (x + (s * (g2 * dt))?)?;
        if k + 1 < n_steps {
            let z = normal_tensor(rng, n_samples, obs_dim)?;
            x = (x + (z * (g2 * dt).sqrt())?)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> VeSchedule {
        VeSchedule::default()
    }

    #[test]
    fn schedule_values() {
        let s = sched();
        assert!((s.sigma(0.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.sigma(1.0).unwrap() - 50.0).abs() < 1e-12);
        assert!((s.sigma(0.5).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        assert!(s.sigma(1.5).is_err());
        assert!(s.sigma(-0.1).is_err());
        assert_eq!(s.marginal_std(0.0).unwrap(), 0.0);
        let ratio = s.lambda_weight(1.0).unwrap() / s.lambda_weight(0.0).unwrap();
        assert!((ratio / 2.5e7 - 1.0).abs() < 1e-12);
        assert!(VeSchedule::new(1.0, 0.5).is_err());
    }

    #[test]
    fn log_sigma_is_affine_and_increasing() {
        let s = sched();
        let ts: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let logs: Vec<f64> = ts.iter().map(|&t| s.sigma(t).unwrap().ln()).collect();
        for w in logs.windows(3) {
            assert!(w[1] > w[0]);
            assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_perturbation() {
        let x0 = nn::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let eta = x0.zeros_like().unwrap();
        let (xt, score) = perturb(&sched(), &x0, &[0.3, 0.9], &eta).unwrap();
        assert_eq!(xt.to_vec2::<f64>().unwrap(), x0.to_vec2::<f64>().unwrap());
        assert!(score
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(perturb(&sched(), &x0, &[0.0, 0.5], &eta).is_err());
    }

    #[test]
    fn kernel_score_identity_and_denoising() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = normal_tensor(&mut rng, 4, 16).unwrap();
        let eta = normal_tensor(&mut rng, 4, 16).unwrap();
        let t = [0.1, 0.4, 0.7, 1.0];
        let (xt, score) = perturb(&s, &x0, &t, &eta).unwrap();
        let score = score.to_vec2::<f64>().unwrap();
        let eta = eta.to_vec2::<f64>().unwrap();
        let xt = xt.to_vec2::<f64>().unwrap();
        let x0 = x0.to_vec2::<f64>().unwrap();
        for r in 0..4 {
            let std = s.marginal_std(t[r]).unwrap();
            let var = s.kernel_var(t[r]).unwrap();
            for c in 0..16 {
                assert!((score[r][c] + eta[r][c] / std).abs() < 1e-9 * (1.0 + score[r][c].abs()));
                let denoised = xt[r][c] + var * score[r][c];
                assert!((denoised - x0[r][c]).abs() < 1e-9 * (1.0 + xt[r][c].abs()));
            }
        }
    }

    #[test]
    fn kernel_variance_monte_carlo() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000 / 16;
        let x0 = Tensor::zeros((n, 16), nn::DTYPE, &nn::device()).unwrap();
        let t = vec![0.35; n];
        let (xt, _) = perturb_rng(&s, &x0, &t, &mut rng).unwrap();
        let v: Vec<f64> = xt.flatten_all().unwrap().to_vec1().unwrap();
        let var = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        let expected = s.kernel_var(0.35).unwrap();
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
    }

    fn oracle_net(
        schedule: VeSchedule,
        x0: Tensor,
        t: Vec<f64>,
    ) -> impl Fn(&Tensor, Option<&Tensor>, &[f64]) -> Result<Tensor> {
        move |u: &Tensor, _c: Option<&Tensor>, _t: &[f64]| {
            let var: Vec<f64> = t
                .iter()
                .map(|&ti| schedule.kernel_var(ti).unwrap())
                .collect();
            Ok((u - &x0)?.broadcast_div(&nn::column(&var)?)?.neg()?)
        }
    }

    #[test]
    fn dsm_oracle_and_zero_nets() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 2000;
        let x0 = normal_tensor(&mut rng, b, 16).unwrap();
        let t: Vec<f64> = draw_times(&mut rng, b);
        let eta = normal_tensor(&mut rng, b, 16).unwrap();
        let oracle = oracle_net(s, x0.clone(), t.clone());
        let l = dsm_loss(&oracle, &s, Weighting::Likelihood, &x0, &t, &eta).unwrap();
        assert!(nn::scalar_value(&l).unwrap().abs() < 1e-12);

        // zero net: per-sample loss is lambda(t) ||eta||^2 / var(t) exactly
        let zero = |u: &Tensor, _: Option<&Tensor>, _: &[f64]| Ok(u.zeros_like()?);
        let l0 =
            nn::scalar_value(&dsm_loss(&zero, &s, Weighting::Likelihood, &x0, &t, &eta).unwrap())
                .unwrap();
        let e = eta.to_vec2::<f64>().unwrap();
        let direct: f64 = (0..b)
            .map(|r| {
                let n2: f64 = e[r].iter().map(|v| v * v).sum();
                s.lambda_weight(t[r]).unwrap() * n2 / s.kernel_var(t[r]).unwrap()
            })
            .sum::<f64>()
            / b as f64;
        assert!((l0 / direct - 1.0).abs() < 1e-12);
        // in expectation ||eta||^2 = 16
        let expected: f64 = (0..b)
            .map(|r| s.lambda_weight(t[r]).unwrap() * 16.0 / s.kernel_var(t[r]).unwrap())
            .sum::<f64>()
            / b as f64;
        assert!((l0 / expected - 1.0).abs() < 0.1, "{l0} vs {expected}");

        // the loss is linear in the weight: lambda / sigma^2 = 2 ln(ratio)
        let l_sigma =
            nn::scalar_value(&dsm_loss(&zero, &s, Weighting::SigmaSquared, &x0, &t, &eta).unwrap())
                .unwrap();
        let ratio = l0 / l_sigma;
        assert!((ratio - 2.0 * s.log_ratio()).abs() < 1e-9);
    }

    #[test]
    fn cdsm_time_blind_encoder_matches() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = ScoreNetwork::new(
            &mut store,
            "score",
            ScoreNetConfig::conditional(3),
            s,
            &mut rng,
        )
        .unwrap();
        let proj = normal_tensor(&mut rng, 16, 3).unwrap();
        let enc = |x: &Tensor, _t: Option<&[f64]>| -> Result<Tensor> { Ok(x.matmul(&proj)?) };
        let x0 = normal_tensor(&mut rng, 8, 16).unwrap();
        let t = draw_times(&mut rng, 8);
        let eta = normal_tensor(&mut rng, 8, 16).unwrap();
        let a = cdsm_loss(&net, &enc, &s, Weighting::Likelihood, &x0, &t, &eta, false).unwrap();
        let b = cdsm_loss(&net, &enc, &s, Weighting::Likelihood, &x0, &t, &eta, true).unwrap();
        assert_eq!(nn::scalar_value(&a).unwrap(), nn::scalar_value(&b).unwrap());

        let bad = |x: &Tensor, _t: Option<&[f64]>| -> Result<Tensor> { Ok(x.narrow(1, 0, 2)?) };
        assert!(cdsm_loss(&net, &bad, &s, Weighting::Likelihood, &x0, &t, &eta, false).is_err());

        let oracle = oracle_net(s, x0.clone(), t.clone());
        let l = cdsm_loss(
            &oracle,
            &enc,
            &s,
            Weighting::Likelihood,
            &x0,
            &t,
            &eta,
            false,
        )
        .unwrap();
        assert!(nn::scalar_value(&l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = sched();
        let x0 = Tensor::zeros((0, 16), nn::DTYPE, &nn::device()).unwrap();
        let zero = |u: &Tensor, _: Option<&Tensor>, _: &[f64]| Ok(u.zeros_like()?);
        assert!(dsm_loss(&zero, &s, Weighting::Likelihood, &x0, &[], &x0).is_err());
    }

    #[test]
    fn network_shapes_and_modes() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layout in [InputLayout::Grid, InputLayout::Flat] {
            let mut store = ParamStore::new();
            let cfg = ScoreNetConfig {
                layout,
                ..ScoreNetConfig::conditional(5)
            };
            let net = ScoreNetwork::new(&mut store, "s", cfg, s, &mut rng).unwrap();
            let u = normal_tensor(&mut rng, 1, 16).unwrap();
            let e = normal_tensor(&mut rng, 1, 5).unwrap();
            assert_eq!(net.score(&u, Some(&e), &[0.3]).unwrap().dims(), &[1, 16]);
            assert_eq!(net.score(&u, None, &[0.3]).unwrap().dims(), &[1, 16]);
            let wrong = normal_tensor(&mut rng, 1, 4).unwrap();
            assert!(net.score(&u, Some(&wrong), &[0.3]).is_err());
        }
        let mut store = ParamStore::new();
        let net =
            ScoreNetwork::new(&mut store, "u", ScoreNetConfig::default(), s, &mut rng).unwrap();
        let u = normal_tensor(&mut rng, 3, 16).unwrap();
        assert_eq!(
            net.score(&u, None, &[0.1, 0.2, 0.3]).unwrap().dims(),
            &[3, 16]
        );
        let bad = ScoreNetConfig {
            obs_dim: 15,
            ..Default::default()
        };
        assert!(ScoreNetwork::new(&mut ParamStore::new(), "b", bad, s, &mut rng).is_err());
    }

    #[test]
    fn reverse_sampler_concentrates_on_point_mass() {
        let s = sched();
        let mu: Vec<f64> = (0..16).map(|k| (k as f64 - 7.5) / 4.0).collect();
        let mu_t = nn::matrix(1, 16, mu.clone()).unwrap();
        // exact score of N(mu, sigma^2(t) I)
        let analytic = move |u: &Tensor, _: Option<&Tensor>, t: &[f64]| -> Result<Tensor> {
            let var: Vec<f64> = t.iter().map(|&ti| s.sigma(ti).unwrap().powi(2)).collect();
            Ok(u.broadcast_sub(&mu_t)?
                .broadcast_div(&nn::column(&var)?)?
                .neg()?)
        };
        let rms = |steps: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let x = reverse_sde_sample(&analytic, &s, None, 16, 64, steps, &mut rng).unwrap();
            let v = x.to_vec2::<f64>().unwrap();
            let mut acc = 0.0;
            for row in &v {
                for (a, b) in row.iter().zip(&mu) {
                    acc += (a - b).powi(2);
                }
            }
            (acc / (64.0 * 16.0)).sqrt()
        };
        // the exact reverse process ends at N(mu, sigma(t_floor)^2 I)
        let target = s.sigma(T_FLOOR).unwrap();
        let coarse = rms(20);
        let fine = rms(500);
        assert!(
            (fine - target).abs() < (coarse - target).abs(),
            "{fine} vs {coarse}"
        );
        assert!((fine - target).abs() < 0.2 * target, "rms {fine}");

        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let one = reverse_sde_sample(&analytic, &s, None, 16, 2, 1, &mut a).unwrap();
        assert!(one
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
        let two = reverse_sde_sample(&analytic, &s, None, 16, 2, 1, &mut b).unwrap();
        assert_eq!(one.to_vec2::<f64>().unwrap(), two.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn score_loss_gradients_match_finite_differences() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (layout, cond) in [
            (InputLayout::Flat, Some(3)),
            (InputLayout::Grid, Some(3)),
            (InputLayout::Flat, None),
        ] {
            let mut store = ParamStore::new();
            let cfg = ScoreNetConfig {
                cond_dim: cond,
                width: 16,
                n_blocks: 1,
                emb_dim: 8,
                layout,
                grid_channels: 2,
                ..Default::default()
            };
            let net = ScoreNetwork::new(&mut store, "score", cfg, s, &mut rng).unwrap();
            let x0 = normal_tensor(&mut rng, 5, 16).unwrap();
            let e = normal_tensor(&mut rng, 5, 3).unwrap();
            let eta = normal_tensor(&mut rng, 5, 16).unwrap();
            let t = [0.05, 0.2, 0.4, 0.6, 0.95];
            let loss = || {
                score_residual(
                    &net,
                    &s,
                    Weighting::Likelihood,
                    &x0,
                    cond.map(|_| &e),
                    &t,
                    &eta,
                )
            };
            let worst = nn::gradient_check(&store, "score", loss, 6, &mut rng).unwrap();
            assert!(worst < 1e-3, "{layout:?}: relative error {worst}");
        }
    }
}

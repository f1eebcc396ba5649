//! Variance schedule and the closed-form diffusion kinematics built on it.
//!
//! Timesteps run over `1..=T`; `t = 0` denotes the clean latent and carries
//! `alpha_bar(0) = 1` so that the implicit sampler can land exactly on it.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{arg_err, ensure_same_dims, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config(format!("schedule needs T >= 1, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule endpoints must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`. A zero beta is accepted here so that the
    /// degenerate no-noise schedule can be expressed.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(t)` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps() {
            return arg_err(format!("timestep {t} outside 1..={}", self.num_steps()));
        }
        Ok(())
    }

    /// Evenly spaced inference timesteps, largest first, always including `T`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.num_steps();
        if steps < 1 || steps > t_max {
            return arg_err(format!("inference steps must be in 1..={t_max}, got {steps}"));
        }
        Ok((1..=steps)
            .rev()
            .map(|i| (i * t_max + steps / 2) / steps)
            .map(|t| t.max(1))
            .collect())
    }
}

fn per_sample(coefs: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1usize; like.rank()];
    dims[0] = coefs.len();
    let v: Vec<f64> = coefs.to_vec();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?
        .to_dtype(like.dtype())?
        .to_device(like.device())?)
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    ensure_same_dims(z0.dims(), eps.dims(), "forward_diffuse")?;
    let ab = sched.alpha_bar(t);
    Ok((z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Batched [`forward_diffuse`] with one timestep per leading-axis sample.
pub fn forward_diffuse_batch(
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_dims(z0.dims(), eps.dims(), "forward_diffuse")?;
    if ts.len() != z0.dim(0)? {
        return arg_err("one timestep per batch element required");
    }
    for &t in ts {
        sched.check_t(t)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let s: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    Ok((z0.broadcast_mul(&per_sample(&a, z0)?)? + eps.broadcast_mul(&per_sample(&s, eps)?)?)?)
}

/// Clean-latent estimate `(z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn recover_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.num_steps() {
        return arg_err(format!("timestep {t} outside 0..={}", sched.num_steps()));
    }
    ensure_same_dims(z_t.dims(), eps_hat.dims(), "recover_z0")?;
    let ab = sched.alpha_bar(t);
    if ab <= f64::EPSILON {
        return Err(Error::Numerical(format!("alpha_bar({t}) = {ab} is numerically zero")));
    }
    let inv = 1.0 / ab.sqrt();
    Ok((z_t.affine(inv, 0.0)? - eps_hat.affine((1.0 - ab).sqrt() * inv, 0.0)?)?)
}

/// Batched [`recover_z0`]; differentiable in both `z_t` and `eps_hat`.
pub fn recover_z0_batch(
    z_t: &Tensor,
    eps_hat: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_dims(z_t.dims(), eps_hat.dims(), "recover_z0")?;
    if ts.len() != z_t.dim(0)? {
        return arg_err("one timestep per batch element required");
    }
    let mut inv = Vec::with_capacity(ts.len());
    let mut coef = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        if ab <= f64::EPSILON {
            return Err(Error::Numerical(format!("alpha_bar({t}) = {ab} is numerically zero")));
        }
        inv.push(1.0 / ab.sqrt());
        coef.push((1.0 - ab).sqrt() / ab.sqrt());
    }
    Ok((z_t.broadcast_mul(&per_sample(&inv, z_t)?)?
        - eps_hat.broadcast_mul(&per_sample(&coef, eps_hat)?)?)?)
}

/// Deterministic implicit-sampler update from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return arg_err(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}"));
    }
    sched.check_t(t)?;
    let z0_hat = recover_z0(z_t, eps_hat, t, sched)?;
    if t_prev == 0 {
        return Ok(z0_hat);
    }
    let ab_prev = sched.alpha_bar(t_prev);
    Ok((z0_hat.affine(ab_prev.sqrt(), 0.0)? + eps_hat.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
}

/// Anything that predicts noise from `(z_t, t)` given a conditioning latent.
/// `z_t` may carry a leading batch axis; `cond` broadcasts over it.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

/// Runs the implicit sampler from `z_t_max` down to a clean latent.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t_max: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor> {
    let ts = sched.inference_timesteps(steps)?;
    let mut z = z_t_max.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = predictor.predict_noise(&z, t, cond)?;
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}

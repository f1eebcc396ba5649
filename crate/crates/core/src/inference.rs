//! Conditional sampling and the two image estimators built on it.
//!
//! A draw `j` of a request with base seed `s` starts its chain from
//! `z_T ~ N(0, I)` seeded with `s + j` (`j = 1..=m`). The latent-average
//! estimator decodes the mean of the draws once; the image-average estimator
//! decodes every draw and averages the images. Both consume identical draws
//! for the same base seed.

use std::cell::Cell;

use candle_core::{DType, Tensor};

use crate::autoencoder::ModalityVae;
use crate::controlnet::ControlNetDenoiser;
use crate::denoiser::DenoiserUNet;
use crate::rng;
use crate::schedule::{ddim_sample, NoisePredictor, NoiseSchedule};
use crate::volume::Volume;
use crate::{arg_err, Error, Result};

/// Draws latents from a conditional distribution, one per seed.
pub trait LatentSampler {
    /// `z_x` is `(1, C, ...)`; returns `(seeds.len(), C, ...)`.
    fn sample_latents(&self, z_x: &Tensor, seeds: &[u64]) -> Result<Tensor>;
}

/// Maps a `(n, C, ...)` latent batch to `(n, 1, ...)` images.
pub trait LatentDecoder {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor>;
}

impl LatentDecoder for ModalityVae {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        self.decode(&z.to_dtype(self.dtype())?)
    }
}

/// Decoder wrapper counting invocations.
pub struct CountingDecoder<'a, D: ?Sized> {
    inner: &'a D,
    calls: Cell<usize>,
}

impl<'a, D: LatentDecoder + ?Sized> CountingDecoder<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: LatentDecoder + ?Sized> LatentDecoder for CountingDecoder<'_, D> {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.decode_latents(z)
    }
}

/// Per-draw seeds `seed + 1 ..= seed + m`.
pub fn draw_seeds(seed: u64, m: usize) -> Vec<u64> {
    (1..=m as u64).map(|j| seed.wrapping_add(j)).collect()
}

/// The `m` latent draws used by both estimators for base seed `seed`.
pub fn draw_latents<S: LatentSampler + ?Sized>(sampler: &S, z_x: &Tensor, m: usize, seed: u64) -> Result<Tensor> {
    if m < 1 {
        return arg_err("at least one latent draw is required");
    }
    sampler.sample_latents(z_x, &draw_seeds(seed, m))
}

/// Mean over the leading axis, accumulated in index order.
pub fn mean_latent(draws: &Tensor) -> Result<Tensor> {
    let m = draws.dim(0)?;
    if m == 0 {
        return arg_err("no latent draws to average");
    }
    let mut acc = draws.narrow(0, 0, 1)?;
    for j in 1..m {
        acc = (acc + draws.narrow(0, j, 1)?)?;
    }
    Ok(acc.affine(1.0 / m as f64, 0.0)?)
}

fn to_volume(img: &Tensor) -> Result<Volume> {
    Volume::from_tensor(&img.to_dtype(DType::F32)?)
}

fn to_values(img: &Tensor) -> Result<Vec<f64>> {
    Ok(img.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Latent-average estimate from precomputed draws: one decoder call.
pub fn las_decode<D: LatentDecoder + ?Sized>(decoder: &D, draws: &Tensor) -> Result<Volume> {
    to_volume(&decoder.decode_latents(&mean_latent(draws)?)?)
}

/// Image-average estimate from precomputed draws: one decoder call per draw,
/// averaged in index order.
pub fn unbiased_decode<D: LatentDecoder + ?Sized>(decoder: &D, draws: &Tensor) -> Result<Volume> {
    let n = draws.dim(0)?;
    if n == 0 {
        return arg_err("no latent draws to decode");
    }
    let mut acc: Option<(Vec<f64>, Vec<usize>)> = None;
    for j in 0..n {
        let img = decoder.decode_latents(&draws.narrow(0, j, 1)?)?;
        let vals = to_values(&img)?;
        match acc.as_mut() {
            None => acc = Some((vals, img.dims()[2..].to_vec())),
            Some((sum, _)) => sum.iter_mut().zip(&vals).for_each(|(s, v)| *s += v),
        }
    }
    let (sum, shape) = acc.expect("n >= 1");
    Volume::new(shape, sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}

/// `D(mean_j z_j)` over `m` draws.
pub fn las_estimate<S, D>(sampler: &S, decoder: &D, z_x: &Tensor, m: usize, seed: u64) -> Result<Volume>
where
    S: LatentSampler + ?Sized,
    D: LatentDecoder + ?Sized,
{
    if m < 1 {
        return arg_err(format!("m must be at least 1, got {m}"));
    }
    las_decode(decoder, &draw_latents(sampler, z_x, m, seed)?)
}

/// `mean_j D(z_j)` over `n` draws.
pub fn unbiased_estimate<S, D>(sampler: &S, decoder: &D, z_x: &Tensor, n: usize, seed: u64) -> Result<Volume>
where
    S: LatentSampler + ?Sized,
    D: LatentDecoder + ?Sized,
{
    if n < 1 {
        return arg_err(format!("N must be at least 1, got {n}"));
    }
    unbiased_decode(decoder, &draw_latents(sampler, z_x, n, seed)?)
}

/// Trained components needed for translation.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub source: ModalityVae,
    /// Target autoencoder carrying the fine-tuned decoder.
    pub target: ModalityVae,
    pub controlnet: ControlNetDenoiser,
    pub schedule: NoiseSchedule,
    pub steps: usize,
    /// Largest number of chains advanced together.
    pub max_batch: usize,
}

/// Noise predictor that keeps no autograd history between steps.
struct Detached<'a>(&'a ControlNetDenoiser);

impl NoisePredictor for Detached<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(z_t, &[t], cond)?.detach())
    }
}

impl ModelBundle {
    pub fn new(
        source: ModalityVae,
        target: ModalityVae,
        controlnet: ControlNetDenoiser,
        schedule: NoiseSchedule,
        steps: usize,
    ) -> Result<Self> {
        if steps < 1 || steps > schedule.num_steps() {
            return Err(Error::Config(format!(
                "inference steps must be in 1..={}, got {steps}",
                schedule.num_steps()
            )));
        }
        let latent = target.latent_dims();
        let unet_cfg = controlnet.backbone().config();
        if source.latent_dims() != latent || unet_cfg.latent_channels != latent[0] {
            return Err(Error::Config(format!(
                "incompatible latent shapes: source {:?}, target {latent:?}, denoiser channels {}",
                source.latent_dims(),
                unet_cfg.latent_channels
            )));
        }
        Ok(Self {
            source,
            target,
            controlnet,
            schedule,
            steps,
            max_batch: 64,
        })
    }

    pub fn unet(&self) -> &DenoiserUNet {
        self.controlnet.backbone()
    }

    /// Posterior mean of the source encoder, `(1, C, ...)`.
    pub fn encode_source(&self, x: &Volume) -> Result<Tensor> {
        Ok(self.source.encode_mean(x)?.detach())
    }

    /// One conditional draw started from `z_T` seeded with `seed`.
    pub fn sample_latent(&self, z_x: &Tensor, seed: u64) -> Result<Tensor> {
        self.sample_latents(z_x, &[seed])
    }

    pub fn las_estimate(&self, x: &Volume, m: usize, seed: u64) -> Result<Volume> {
        las_estimate(self, self, &self.encode_source(x)?, m, seed)
    }

    pub fn unbiased_estimate(&self, x: &Volume, n: usize, seed: u64) -> Result<Volume> {
        unbiased_estimate(self, self, &self.encode_source(x)?, n, seed)
    }
}

impl LatentSampler for ModelBundle {
    fn sample_latents(&self, z_x: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let dims = self.target.latent_dims();
        let (dtype, dev) = (self.target.dtype(), self.target.device());
        let cond = z_x.to_dtype(dtype)?;
        let mut out = Vec::new();
        for chunk in seeds.chunks(self.max_batch.max(1)) {
            let starts = chunk
                .iter()
                .map(|&s| {
                    let mut shape = vec![1];
                    shape.extend(&dims);
                    rng::normal_tensor(&mut rng::seeded(s), shape, dtype, dev)
                })
                .collect::<Result<Vec<_>>>()?;
            let z_t = Tensor::cat(&starts, 0)?;
            out.push(ddim_sample(&Detached(&self.controlnet), &z_t, &cond, &self.schedule, self.steps)?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

impl LatentDecoder for ModelBundle {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.target.decode_latents(z)?.detach())
    }
}

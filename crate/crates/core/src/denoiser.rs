//! Latent noise-prediction U-Net with sinusoidal timestep conditioning.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{group_norm, silu, upsample2x, Builder, Conv, GroupNorm, Linear, Params, SpatialRank};
use crate::rng::{self, SeededRng};
use crate::{arg_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub rank: SpatialRank,
    pub latent_channels: usize,
    /// Width of each resolution level; one downsample follows every level.
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    /// Sinusoidal feature size (also the hidden size of the time MLP).
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            rank: SpatialRank::Two,
            latent_channels: 4,
            widths: vec![32, 64],
            bottleneck: 128,
            time_dim: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("unet needs at least one level".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        for &w in self.widths.iter().chain(std::iter::once(&self.bottleneck)) {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "width {w} not divisible into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(t f_i), cos(t f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

fn embedding_tensor(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t, dim)?);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Residual block; the projected timestep embedding is added after the first conv.
#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    temb: Linear,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    skip: Option<Conv>,
}

impl Block {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        let mut b = b.pp(name);
        let r = cfg.rank;
        Ok(Self {
            conv1: Conv::new(&mut b, "conv1", c_in, c_out, 3, 1, r)?,
            temb: Linear::new(&mut b, "temb", cfg.time_dim, c_out)?,
            norm1: group_norm(&mut b, "norm1", cfg.groups, c_out)?,
            conv2: Conv::new(&mut b, "conv2", c_out, c_out, 3, 1, r)?,
            norm2: group_norm(&mut b, "norm2", cfg.groups, c_out)?,
            skip: if c_in != c_out {
                Some(Conv::new(&mut b, "skip", c_in, c_out, 1, 1, r)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let mut e_dims = vec![1usize; h.rank()];
        e_dims[0] = temb.dim(0)?;
        e_dims[1] = h.dim(1)?;
        let e = self.temb.forward(temb)?.reshape(e_dims)?;
        let h = silu(&self.norm1.forward(&h.broadcast_add(&e)?)?)?;
        let h = silu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        let res = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

/// Time MLP, input conv, per-level blocks with downsampling, and the
/// bottleneck. This is the part a ControlNet duplicates.
#[derive(Clone, Debug)]
pub(crate) struct UNetEncoder {
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    levels: Vec<Block>,
    downs: Vec<Conv>,
    mid: Block,
    time_dim: usize,
}

impl UNetEncoder {
    pub(crate) fn new(b: &mut Builder, cfg: &UNetConfig) -> Result<Self> {
        let r = cfg.rank;
        let w = &cfg.widths;
        let time1 = Linear::new(b, "time1", cfg.time_dim, cfg.time_dim)?;
        let time2 = Linear::new(b, "time2", cfg.time_dim, cfg.time_dim)?;
        let conv_in = Conv::new(b, "conv_in", cfg.latent_channels, w[0], 3, 1, r)?;
        let mut levels = Vec::with_capacity(w.len());
        let mut downs = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            levels.push(Block::new(b, &format!("level{i}"), w[i], w[i], cfg)?);
            let next = w.get(i + 1).copied().unwrap_or(cfg.bottleneck);
            downs.push(Conv::new(b, &format!("down{i}"), w[i], next, 3, 2, r)?);
        }
        let mid = Block::new(b, "mid", cfg.bottleneck, cfg.bottleneck, cfg)?;
        Ok(Self {
            time1,
            time2,
            conv_in,
            levels,
            downs,
            mid,
            time_dim: cfg.time_dim,
        })
    }

    pub(crate) fn time_embedding(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let e = embedding_tensor(ts, self.time_dim, dtype, device)?;
        self.time2.forward(&silu(&self.time1.forward(&e)?)?)
    }

    /// One feature map per level (pre-downsampling) followed by the bottleneck output.
    /// `extra`, when given, is added to the input-conv features.
    pub(crate) fn forward(&self, z: &Tensor, temb: &Tensor, extra: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut h = self.conv_in.forward(z)?;
        if let Some(e) = extra {
            h = h.broadcast_add(e)?;
        }
        let mut feats = Vec::with_capacity(self.levels.len() + 1);
        for (block, down) in self.levels.iter().zip(&self.downs) {
            h = block.forward(&h, temb)?;
            feats.push(h.clone());
            h = down.forward(&h)?;
        }
        feats.push(self.mid.forward(&h, temb)?);
        Ok(feats)
    }
}

#[derive(Clone, Debug)]
struct UNetDecoder {
    ups: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNetDecoder {
    fn new(b: &mut Builder, cfg: &UNetConfig) -> Result<Self> {
        let w = &cfg.widths;
        let mut ups = Vec::with_capacity(w.len());
        for i in (0..w.len()).rev() {
            let below = w.get(i + 1).copied().unwrap_or(cfg.bottleneck);
            ups.push(Block::new(b, &format!("up{i}"), below + w[i], w[i], cfg)?);
        }
        Ok(Self {
            ups,
            norm_out: group_norm(b, "norm_out", cfg.groups, w[0])?,
            // zero-initialized so the untrained network predicts zero noise
            conv_out: Conv::with_init(b, "conv_out", w[0], cfg.latent_channels, 3, 1, cfg.rank, true)?,
        })
    }

    fn forward(&self, feats: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        let n = feats.len() - 1;
        let mut h = feats[n].clone();
        for (k, block) in self.ups.iter().enumerate() {
            let skip = &feats[n - 1 - k];
            h = Tensor::cat(&[&upsample2x(&h)?, skip], 1)?;
            h = block.forward(&h, temb)?;
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserUNet {
    cfg: UNetConfig,
    params: Params,
    encoder: UNetEncoder,
    decoder: UNetDecoder,
    device: Device,
    dtype: DType,
}

impl DenoiserUNet {
    pub fn new(cfg: &UNetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        Self::build(cfg, Params::new(), &mut rng, dtype, device, false)
    }

    pub fn from_params(cfg: &UNetConfig, params: Params, device: &Device) -> Result<Self> {
        let dtype = params.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32);
        let n = params.len();
        let mut rng = rng::seeded(0);
        let net = Self::build(cfg, params, &mut rng, dtype, device, false)?;
        if net.params.len() != n {
            return Err(Error::Format(format!(
                "unet parameter set incomplete: {n} stored, {} required",
                net.params.len()
            )));
        }
        Ok(net)
    }

    fn build(
        cfg: &UNetConfig,
        mut params: Params,
        rng: &mut SeededRng,
        dtype: DType,
        device: &Device,
        frozen: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (encoder, decoder) = {
            let mut b = Builder::new(&mut params, rng, dtype, device);
            if frozen {
                b = b.frozen();
            }
            let enc = UNetEncoder::new(&mut b.pp("encoder"), cfg)?;
            let dec = UNetDecoder::new(&mut b.pp("decoder"), cfg)?;
            (enc, dec)
        };
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
            device: device.clone(),
            dtype,
        })
    }

    /// View over the same parameters whose forward pass records no gradients
    /// for them.
    pub fn frozen_view(&self) -> Result<Self> {
        let mut rng = rng::seeded(0);
        Self::build(&self.cfg, self.params.clone(), &mut rng, self.dtype, &self.device, true)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub(crate) fn check_latent(&self, z: &Tensor) -> Result<()> {
        let dims = z.dims();
        let nd = self.cfg.rank.ndim();
        if dims.len() != nd + 2 || dims[1] != self.cfg.latent_channels {
            return arg_err(format!(
                "expected (batch, {}, {nd} spatial dims), got {dims:?}",
                self.cfg.latent_channels
            ));
        }
        let f = 1usize << self.cfg.widths.len();
        if dims[2..].iter().any(|&s| s == 0 || s % f != 0) {
            return arg_err(format!("spatial dims {:?} must be divisible by {f}", &dims[2..]));
        }
        Ok(())
    }

    pub(crate) fn expand_timesteps(&self, z: &Tensor, ts: &[usize]) -> Result<Vec<usize>> {
        let b = z.dim(0)?;
        match ts.len() {
            1 => Ok(vec![ts[0]; b]),
            n if n == b => Ok(ts.to_vec()),
            n => arg_err(format!("{n} timesteps for a batch of {b}")),
        }
    }

    /// Predicted noise for a `(B, C, ...)` batch. `ts` has one entry per
    /// sample or a single shared entry.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward_with_residuals(z_t, ts, None)
    }

    /// Forward pass with optional additive residuals on every skip feature
    /// and the bottleneck output (the ControlNet injection points).
    pub fn forward_with_residuals(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        residuals: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        self.check_latent(z_t)?;
        let ts = self.expand_timesteps(z_t, ts)?;
        let temb = self.encoder.time_embedding(&ts, z_t.dtype(), z_t.device())?;
        let mut feats = self.encoder.forward(z_t, &temb, None)?;
        if let Some(res) = residuals {
            if res.len() != feats.len() {
                return arg_err(format!("{} residuals for {} injection points", res.len(), feats.len()));
            }
            for (f, r) in feats.iter_mut().zip(res) {
                *f = f.broadcast_add(r)?;
            }
        }
        self.decoder.forward(&feats, &temb)
    }
}

impl crate::schedule::NoisePredictor for DenoiserUNet {
    fn predict_noise(&self, z_t: &Tensor, t: usize, _cond: &Tensor) -> Result<Tensor> {
        self.forward(z_t, &[t])
    }
}

//! Conditional denoiser: a frozen U-Net plus a trainable copy of its encoder
//! whose features are injected through zero-initialized 1x1 convolutions.
//!
//! The conditioning latent enters once, through `zero_in`, added to the copy's
//! input-conv features. Each copy feature map (one per level plus the
//! bottleneck) passes through its own zero conv and is added to the frozen
//! U-Net's matching skip connection.

use candle_core::{Tensor, Var};

use crate::denoiser::{DenoiserUNet, UNetEncoder};
use crate::nn::{Builder, Conv, Params};
use crate::rng;
use crate::schedule::NoisePredictor;
use crate::{arg_err, Error, Result};

#[derive(Clone, Debug)]
pub struct ControlNetDenoiser {
    frozen: DenoiserUNet,
    frozen_checksum: String,
    params: Params,
    copy: UNetEncoder,
    zero_in: Conv,
    zero_out: Vec<Conv>,
}

impl ControlNetDenoiser {
    /// Trainable copy initialized from the backbone encoder, all zero convs zero.
    pub fn new(unet: &DenoiserUNet) -> Result<Self> {
        let params = unet.params().copy_prefixed("encoder", "copy")?;
        Self::assemble(unet, params)
    }

    /// Rebuild from stored ControlNet parameters (copy + zero convs).
    pub fn from_params(unet: &DenoiserUNet, params: Params) -> Result<Self> {
        let n = params.len();
        let cn = Self::assemble(unet, params)?;
        if cn.params.len() != n {
            return Err(Error::Format(format!(
                "controlnet parameter set incomplete: {n} stored, {} required",
                cn.params.len()
            )));
        }
        Ok(cn)
    }

    fn assemble(unet: &DenoiserUNet, mut params: Params) -> Result<Self> {
        let cfg = unet.config().clone();
        let frozen = unet.frozen_view()?;
        let frozen_checksum = unet.params().checksum()?;
        let mut r = rng::seeded(0);
        let (copy, zero_in, zero_out) = {
            let mut b = Builder::new(&mut params, &mut r, unet.dtype(), unet.device());
            let copy = UNetEncoder::new(&mut b.pp("copy"), &cfg)?;
            let zero_in = Conv::zero(&mut b, "zero_in", cfg.latent_channels, cfg.widths[0], cfg.rank)?;
            let mut zero_out = Vec::with_capacity(cfg.widths.len() + 1);
            for (i, &w) in cfg.widths.iter().chain(std::iter::once(&cfg.bottleneck)).enumerate() {
                zero_out.push(Conv::zero(&mut b, &format!("zero_out{i}"), w, w, cfg.rank)?);
            }
            (copy, zero_in, zero_out)
        };
        Ok(Self {
            frozen,
            frozen_checksum,
            params,
            copy,
            zero_in,
            zero_out,
        })
    }

    /// The trainable set: copy, input zero conv and output zero convs.
    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_elements()
    }

    pub fn backbone(&self) -> &DenoiserUNet {
        &self.frozen
    }

    /// Checksum of the backbone parameters taken when this ControlNet was built.
    pub fn backbone_checksum(&self) -> &str {
        &self.frozen_checksum
    }

    pub fn zero_convs(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.zero_in).chain(self.zero_out.iter())
    }

    /// Conditional noise prediction. `z_c` is `(1, C, ...)` (shared across the
    /// batch) or `(B, C, ...)`.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], z_c: &Tensor) -> Result<Tensor> {
        self.frozen.check_latent(z_t)?;
        if z_c.dims().len() != z_t.dims().len() || z_c.dims()[1..] != z_t.dims()[1..] {
            return arg_err(format!(
                "conditioning latent {:?} does not match {:?}",
                z_c.dims(),
                z_t.dims()
            ));
        }
        let b = z_t.dim(0)?;
        if z_c.dim(0)? != 1 && z_c.dim(0)? != b {
            return arg_err(format!("conditioning batch {} vs {b}", z_c.dim(0)?));
        }
        let ts = self.frozen.expand_timesteps(z_t, ts)?;
        let temb = self.copy.time_embedding(&ts, z_t.dtype(), z_t.device())?;
        let cond = self.zero_in.forward(z_c)?;
        let feats = self.copy.forward(z_t, &temb, Some(&cond))?;
        let residuals = feats
            .iter()
            .zip(&self.zero_out)
            .map(|(f, z)| z.forward(f))
            .collect::<Result<Vec<_>>>()?;
        self.frozen.forward_with_residuals(z_t, &ts, Some(&residuals))
    }
}

impl NoisePredictor for ControlNetDenoiser {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.forward(z_t, &[t], cond)
    }
}

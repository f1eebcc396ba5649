//! Per-modality variational autoencoders mapping images to a shared-shape
//! spatial latent (factor-4 downsampling) and back.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{silu, upsample2x, Builder, Conv, Params, SpatialRank};
use crate::rng::{self, SeededRng};
use crate::volume::Volume;
use crate::{arg_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub rank: SpatialRank,
    /// Edge length of the (square / cubic) input image.
    pub image_size: usize,
    /// Feature widths at full and downsampled resolution.
    pub channels: [usize; 2],
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            rank: SpatialRank::Two,
            image_size: 64,
            channels: [16, 32],
            latent_channels: 4,
        }
    }
}

impl VaeConfig {
    pub fn volumetric() -> Self {
        Self {
            rank: SpatialRank::Three,
            image_size: 32,
            channels: [8, 16],
            latent_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn image_dims(&self) -> Vec<usize> {
        vec![self.image_size; self.rank.ndim()]
    }

    /// `[C, s, s(, s)]` with `s = image_size / 4`.
    pub fn latent_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_channels];
        d.extend(std::iter::repeat_n(self.image_size / 4, self.rank.ndim()));
        d
    }
}

/// Diagonal Gaussian posterior over the latent.
#[derive(Clone, Debug)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentDistribution {
    /// `mean + exp(logvar / 2) * noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        crate::ensure_same_dims(self.mean.dims(), noise.dims(), "posterior sample")?;
        Ok((&self.mean + (self.logvar.affine(0.5, 0.0)?.exp()? * noise)?)?)
    }
}

/// Closed-form KL to the standard normal prior, averaged over elements.
pub fn kl_divergence(dist: &LatentDistribution) -> Result<Tensor> {
    let var = dist.logvar.exp()?;
    let terms = ((dist.mean.sqr()? + var)? - &dist.logvar)?.affine(1.0, -1.0)?;
    Ok(terms.mean_all()?.affine(0.5, 0.0)?)
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv,
    down0: Conv,
    mid0: Conv,
    down1: Conv,
    mid1: Conv,
    conv_out: Conv,
}

impl Encoder {
    fn new(b: &mut Builder, cfg: &VaeConfig) -> Result<Self> {
        let r = cfg.rank;
        let [c0, c1] = cfg.channels;
        Ok(Self {
            conv_in: Conv::new(b, "conv_in", 1, c0, 3, 1, r)?,
            down0: Conv::new(b, "down0", c0, c1, 3, 2, r)?,
            mid0: Conv::new(b, "mid0", c1, c1, 3, 1, r)?,
            down1: Conv::new(b, "down1", c1, c1, 3, 2, r)?,
            mid1: Conv::new(b, "mid1", c1, c1, 3, 1, r)?,
            conv_out: Conv::new(b, "conv_out", c1, 2 * cfg.latent_channels, 3, 1, r)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.conv_in.forward(x)?)?;
        let h = silu(&self.down0.forward(&h)?)?;
        let h = silu(&self.mid0.forward(&h)?)?;
        let h = silu(&self.down1.forward(&h)?)?;
        let h = silu(&self.mid1.forward(&h)?)?;
        self.conv_out.forward(&h)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv,
    mid: Conv,
    up0: Conv,
    up1: Conv,
    conv_out: Conv,
}

impl Decoder {
    fn new(b: &mut Builder, cfg: &VaeConfig) -> Result<Self> {
        let r = cfg.rank;
        let [c0, c1] = cfg.channels;
        Ok(Self {
            conv_in: Conv::new(b, "conv_in", cfg.latent_channels, c1, 3, 1, r)?,
            mid: Conv::new(b, "mid", c1, c1, 3, 1, r)?,
            up0: Conv::new(b, "up0", c1, c0, 3, 1, r)?,
            up1: Conv::new(b, "up1", c0, c0, 3, 1, r)?,
            conv_out: Conv::new(b, "conv_out", c0, 1, 3, 1, r)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = silu(&self.conv_in.forward(z)?)?;
        let h = silu(&self.mid.forward(&h)?)?;
        let h = silu(&self.up0.forward(&upsample2x(&h)?)?)?;
        let h = silu(&self.up1.forward(&upsample2x(&h)?)?)?;
        // no output nonlinearity: images are z-scored and unbounded
        self.conv_out.forward(&h)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityVae {
    cfg: VaeConfig,
    modality: Modality,
    params: Params,
    encoder: Encoder,
    decoder: Decoder,
    device: Device,
}

impl ModalityVae {
    pub fn new(
        cfg: &VaeConfig,
        modality: Modality,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        Self::build(cfg, modality, Params::new(), &mut rng, dtype, device)
    }

    /// Rebuild around existing parameters (e.g. from a checkpoint).
    pub fn from_params(
        cfg: &VaeConfig,
        modality: Modality,
        params: Params,
        device: &Device,
    ) -> Result<Self> {
        let dtype = params
            .iter()
            .next()
            .map(|(_, v)| v.dtype())
            .unwrap_or(DType::F32);
        let mut rng = rng::seeded(0);
        let n = params.len();
        let vae = Self::build(cfg, modality, params, &mut rng, dtype, device)?;
        if vae.params.len() != n {
            return Err(Error::Format(format!(
                "VAE parameter set incomplete: {n} stored, {} required",
                vae.params.len()
            )));
        }
        Ok(vae)
    }

    fn build(
        cfg: &VaeConfig,
        modality: Modality,
        mut params: Params,
        rng: &mut SeededRng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let (encoder, decoder) = {
            let mut b = Builder::new(&mut params, rng, dtype, device);
            let enc = Encoder::new(&mut b.pp("encoder"), cfg)?;
            let dec = Decoder::new(&mut b.pp("decoder"), cfg)?;
            (enc, dec)
        };
        Ok(Self {
            cfg: cfg.clone(),
            modality,
            params,
            encoder,
            decoder,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.params
            .iter()
            .next()
            .map(|(_, v)| v.dtype())
            .unwrap_or(DType::F32)
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.cfg.latent_dims()
    }

    pub fn decoder_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix("decoder")
    }

    pub fn encoder_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix("encoder")
    }

    fn check_batch(&self, x: &Tensor, expect: &[usize], what: &str) -> Result<()> {
        let dims = x.dims();
        if dims.len() != expect.len() + 1 || &dims[1..] != expect {
            return arg_err(format!("{what}: expected (batch, {expect:?}), got {dims:?}"));
        }
        Ok(())
    }

    /// Posterior and latent sample for a `(B, 1, *image)` batch. With no
    /// noise the sample is the posterior mean.
    pub fn encode(
        &self,
        images: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<(LatentDistribution, Tensor)> {
        let mut expect = vec![1];
        expect.extend(self.cfg.image_dims());
        self.check_batch(images, &expect, "encode")?;
        let h = self.encoder.forward(images)?;
        let l = self.cfg.latent_channels;
        let mean = h.narrow(1, 0, l)?;
        let logvar = h.narrow(1, l, l)?.clamp(-30.0, 20.0)?;
        let dist = LatentDistribution { mean, logvar };
        let sample = match noise {
            Some(n) => dist.sample(n)?,
            None => dist.mean.clone(),
        };
        Ok((dist, sample))
    }

    /// Deterministic encoding (posterior mean) of a single volume, `(1, C, ...)`.
    pub fn encode_mean(&self, image: &Volume) -> Result<Tensor> {
        let x = image.to_tensor(self.dtype(), &self.device)?;
        Ok(self.encode(&x, None)?.1)
    }

    /// Decode a `(B, C, *latent)` batch to `(B, 1, *image)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_batch(z, &self.cfg.latent_dims(), "decode")?;
        self.decoder.forward(z)
    }
}

#[derive(Clone, Debug)]
pub struct VaeLoss {
    /// Differentiable scalar `reconstruction + kl_weight * kl`.
    pub total: Tensor,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Mean L1 reconstruction plus weighted KL, with the reparameterization noise
/// drawn from `seed`.
pub fn vae_loss(vae: &ModalityVae, images: &Tensor, kl_weight: f64, seed: u64) -> Result<VaeLoss> {
    if kl_weight < 0.0 {
        return arg_err(format!("kl_weight must be non-negative, got {kl_weight}"));
    }
    let mut rng = rng::seeded(seed);
    let mut ldims = vec![images.dim(0)?];
    ldims.extend(vae.latent_dims());
    let noise = rng::normal_tensor(&mut rng, ldims, images.dtype(), images.device())?;
    let (dist, z) = vae.encode(images, Some(&noise))?;
    let recon = (vae.decode(&z)? - images)?.abs()?.mean_all()?;
    let kl = kl_divergence(&dist)?;
    let total = (&recon + kl.affine(kl_weight, 0.0)?)?;
    Ok(VaeLoss {
        total,
        reconstruction: scalar(&recon)?,
        kl: scalar(&kl)?,
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

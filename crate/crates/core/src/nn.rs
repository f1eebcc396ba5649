//! Small layer toolkit shared by the autoencoder, denoiser and ControlNet.
//!
//! Parameters live in a [`Params`] store keyed by dotted path. Networks are
//! built through a [`Builder`], which creates missing parameters from a seeded
//! initializer and otherwise reuses the stored ones, so the same constructor
//! serves fresh initialization, checkpoint loading, and frozen (detached) views.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, SeededRng};
use crate::{arg_err, Error, Result};

/// Spatial dimensionality of images and latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialRank {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl SpatialRank {
    pub fn ndim(self) -> usize {
        match self {
            SpatialRank::Two => 2,
            SpatialRank::Three => 3,
        }
    }

    pub fn from_ndim(n: usize) -> Result<Self> {
        match n {
            2 => Ok(SpatialRank::Two),
            3 => Ok(SpatialRank::Three),
            _ => Err(Error::Config(format!("unsupported spatial rank {n}"))),
        }
    }
}

#[derive(Clone, Default)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Params")
            .field("tensors", &self.vars.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy: new variables holding the same values.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Params::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Copy of every entry whose name starts with `prefix.`, renamed under `new_prefix.`.
    pub fn copy_prefixed(&self, prefix: &str, new_prefix: &str) -> Result<Self> {
        let mut out = Params::new();
        let pat = format!("{prefix}.");
        for (k, v) in &self.vars {
            if let Some(rest) = k.strip_prefix(&pat) {
                let var = Var::from_tensor(&v.as_tensor().copy()?)?;
                out.insert(format!("{new_prefix}.{rest}"), var);
            }
        }
        Ok(out)
    }

    /// The same variables renamed under `prefix.`.
    pub fn nested(&self, prefix: &str) -> Self {
        let vars = self.vars.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect();
        Self { vars }
    }

    /// Entries under `prefix.` with the prefix removed, sharing variables.
    pub fn scoped(&self, prefix: &str) -> Self {
        let pat = format!("{prefix}.");
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&pat).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        Self { vars }
    }

    pub fn extend(&mut self, other: Params) {
        self.vars.extend(other.vars);
    }

    /// Variables whose names start with `prefix.`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let pat = format!("{prefix}.");
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(&pat))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Params::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

/// Resolves named parameters against a [`Params`] store.
pub struct Builder<'a> {
    store: &'a mut Params,
    rng: &'a mut SeededRng,
    prefix: String,
    detach: bool,
    dtype: DType,
    device: Device,
}

impl<'a> Builder<'a> {
    pub fn new(
        store: &'a mut Params,
        rng: &'a mut SeededRng,
        dtype: DType,
        device: &Device,
    ) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            detach: false,
            dtype,
            device: device.clone(),
        }
    }

    /// Parameters come out detached from the autograd graph.
    pub fn frozen(mut self) -> Self {
        self.detach = true;
        self
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            detach: self.detach,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, dims: &[usize], init: InitKind) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = match self.store.get(&full) {
            Some(v) => {
                if v.dims() != dims {
                    return arg_err(format!(
                        "parameter {full}: stored shape {:?}, expected {dims:?}",
                        v.dims()
                    ));
                }
                v.clone()
            }
            None => {
                let t = match init {
                    InitKind::FanIn(fan_in) => {
                        let b = 1.0 / (fan_in.max(1) as f32).sqrt();
                        rng::uniform_tensor(self.rng, dims, -b, b, self.dtype, &self.device)?
                    }
                    InitKind::Zeros => Tensor::zeros(dims, self.dtype, &self.device)?,
                    InitKind::Ones => Tensor::ones(dims, self.dtype, &self.device)?,
                };
                let v = Var::from_tensor(&t)?;
                self.store.insert(full, v.clone());
                v
            }
        };
        Ok(if self.detach {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// 2D or 3D convolution with "same"-style symmetric padding and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    rank: SpatialRank,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rank: SpatialRank,
    ) -> Result<Self> {
        Self::with_init(b, name, c_in, c_out, kernel, stride, rank, false)
    }

    /// 1x1 convolution with zero weight and bias.
    pub fn zero(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        rank: SpatialRank,
    ) -> Result<Self> {
        Self::with_init(b, name, c_in, c_out, 1, 1, rank, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rank: SpatialRank,
        zero_init: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.pow(rank.ndim() as u32);
        let mut dims = vec![c_out, c_in];
        dims.extend(std::iter::repeat_n(kernel, rank.ndim()));
        let (w_init, b_init) = if zero_init {
            (InitKind::Zeros, InitKind::Zeros)
        } else {
            (InitKind::FanIn(fan_in), InitKind::FanIn(fan_in))
        };
        let mut b = b.pp(name);
        let weight = b.get("weight", &dims, w_init)?;
        let bias = b.get("bias", &[c_out], b_init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            rank,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.rank {
            SpatialRank::Two => x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?,
            SpatialRank::Three => conv3d(x, &self.weight, self.padding, self.stride)?,
        };
        let mut bdims = vec![1usize; y.rank()];
        bdims[1] = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape(bdims)?)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// 3D convolution assembled from 2D convolutions over depth slices, one per
/// kernel depth offset. Differentiable through the 2D kernels.
pub fn conv3d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, d, _h, _w) = x.dims5()?;
    let (_o, c_w, k, _, _) = w.dims5()?;
    if c != c_w {
        return arg_err(format!("conv3d: input has {c} channels, kernel expects {c_w}"));
    }
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
    } else {
        x.clone()
    }
    .contiguous()?;
    let d_out = (d + 2 * padding - k) / stride + 1;
    let mut acc: Option<Tensor> = None;
    for kd in 0..k {
        let idx: Vec<u32> = (0..d_out).map(|i| (kd + stride * i) as u32).collect();
        let idx = Tensor::from_vec(idx, d_out, x.device())?;
        let slab = xp.index_select(&idx, 2)?; // (b, c, d_out, h, w)
        let (_, _, _, hh, ww) = slab.dims5()?;
        let slab = slab
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * d_out, c, hh, ww))?;
        let wk = w.narrow(2, kd, 1)?.squeeze(2)?.contiguous()?;
        let y = slab.conv2d(&wk, padding, stride, 1, 1)?;
        acc = Some(match acc {
            None => y,
            Some(a) => (a + y)?,
        });
    }
    let y = acc.expect("kernel depth is at least one");
    let (_, o, ho, wo) = y.dims4()?;
    Ok(y.reshape((b, d_out, o, ho, wo))?.transpose(1, 2)?.contiguous()?)
}

/// Nearest-neighbour 2x upsampling over every spatial axis.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let mut expanded = Vec::with_capacity(2 + 2 * (dims.len() - 2));
    let mut target = Vec::with_capacity(expanded.capacity());
    let mut out = dims[..2].to_vec();
    expanded.extend_from_slice(&dims[..2]);
    target.extend_from_slice(&dims[..2]);
    for &s in &dims[2..] {
        expanded.extend_from_slice(&[s, 1]);
        target.extend_from_slice(&[s, 2]);
        out.push(2 * s);
    }
    Ok(x.reshape(expanded)?.broadcast_as(target)?.contiguous()?.reshape(out)?)
}

pub fn group_norm(b: &mut Builder, name: &str, groups: usize, channels: usize) -> Result<GroupNorm> {
    let mut b = b.pp(name);
    let weight = b.get("weight", &[channels], InitKind::Ones)?;
    let bias = b.get("bias", &[channels], InitKind::Zeros)?;
    Ok(GroupNorm(candle_nn::GroupNorm::new(
        weight, bias, channels, groups, 1e-5,
    )?))
}

#[derive(Clone, Debug)]
pub struct GroupNorm(candle_nn::GroupNorm);

impl GroupNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.0, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear(candle_nn::Linear);

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut b = b.pp(name);
        let weight = b.get("weight", &[d_out, d_in], InitKind::FanIn(d_in))?;
        let bias = b.get("bias", &[d_out], InitKind::FanIn(d_in))?;
        Ok(Self(candle_nn::Linear::new(weight, Some(bias))))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.0, x)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Plain Adam (AdamW with zero weight decay) over `vars`.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    let params = candle_nn::ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(candle_nn::Optimizer::new(vars, params)?)
}

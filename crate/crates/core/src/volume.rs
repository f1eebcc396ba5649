use candle_core::{DType, Device, Tensor};

use crate::{arg_err, Result};

/// A single-channel 2D or 3D image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != data.len() {
            return arg_err(format!(
                "volume shape {shape:?} does not match {} elements",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Tensor of shape `(1, 1, *shape)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut dims = vec![1, 1];
        dims.extend_from_slice(&self.shape);
        Ok(Tensor::from_slice(&self.data, dims, device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Volume::to_tensor`]; accepts `(1, 1, *spatial)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() < 4 || dims[0] != 1 || dims[1] != 1 {
            return arg_err(format!("expected a (1, 1, ...) tensor, got {dims:?}"));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(dims[2..].to_vec(), data)
    }

    /// Stack volumes of identical shape into a `(n, 1, *shape)` tensor.
    pub fn stack(vols: &[&Volume], dtype: DType, device: &Device) -> Result<Tensor> {
        let Some(first) = vols.first() else {
            return arg_err("cannot stack an empty volume list");
        };
        let mut data = Vec::with_capacity(first.len() * vols.len());
        for v in vols {
            if v.shape != first.shape {
                return arg_err("cannot stack volumes of different shapes");
            }
            data.extend_from_slice(&v.data);
        }
        let mut dims = vec![vols.len(), 1];
        dims.extend_from_slice(&first.shape);
        Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
    }

    /// Split a `(n, 1, *shape)` tensor back into volumes.
    pub fn unstack(t: &Tensor) -> Result<Vec<Volume>> {
        let n = t.dim(0)?;
        (0..n)
            .map(|i| Volume::from_tensor(&t.narrow(0, i, 1)?))
            .collect()
    }
}

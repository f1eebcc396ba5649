//! Closed-form samplers and decoders with known estimator behaviour, used as
//! test oracles for the inference and diagnostic code.

use candle_core::{DType, Tensor};

use crate::inference::{LatentDecoder, LatentSampler};
use crate::rng;
use crate::{arg_err, Result};

/// Isotropic Gaussian `N(mean, std^2 I)` that ignores the conditioning latent.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: Tensor,
    std: f64,
}

impl GaussianSampler {
    /// `mean` is `(1, C, ...)`; computation runs in `f64`.
    pub fn new(mean: Tensor, std: f64) -> Result<Self> {
        if mean.dims().first() != Some(&1) {
            return arg_err(format!("sampler mean must have batch 1, got {:?}", mean.dims()));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return arg_err(format!("sampler std must be finite and non-negative, got {std}"));
        }
        Ok(Self {
            mean: mean.to_dtype(DType::F64)?,
            std,
        })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    /// Per-element variance.
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

impl LatentSampler for GaussianSampler {
    fn sample_latents(&self, _z_x: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let draws = seeds
            .iter()
            .map(|&s| {
                let eps = rng::normal_tensor(&mut rng::seeded(s), self.mean.shape(), DType::F64, self.mean.device())?;
                Ok((&self.mean + eps.affine(self.std, 0.0)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&draws, 0)?)
    }
}

/// `D(z)_k = a z_k + c z_k^2 + b`, applied elementwise; the output keeps the
/// latent layout behind a singleton channel axis.
#[derive(Clone, Copy, Debug)]
pub struct ElementwiseDecoder {
    pub a: f64,
    pub c: f64,
    pub b: f64,
}

impl ElementwiseDecoder {
    pub fn new(a: f64, c: f64, b: f64) -> Self {
        Self { a, c, b }
    }

    /// Exact `1/2 Tr(H Sigma)` per output element under `N(mu, s^2 I)`.
    pub fn trace_term(&self, variance: f64) -> f64 {
        self.c * variance
    }
}

impl LatentDecoder for ElementwiseDecoder {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let z = z.to_dtype(DType::F64)?;
        let out = (z.affine(self.a, self.b)? + z.sqr()?.affine(self.c, 0.0)?)?;
        Ok(out.unsqueeze(1)?)
    }
}

/// `D(z) = A z + b` with a dense matrix over the flattened latent.
#[derive(Clone, Debug)]
pub struct AffineDecoder {
    matrix: Tensor,
    offset: Tensor,
    out_shape: Vec<usize>,
}

impl AffineDecoder {
    /// `matrix` is `(out, in)`, `offset` is `(out,)`; `out_shape` must hold
    /// `out` elements.
    pub fn new(matrix: Tensor, offset: Tensor, out_shape: Vec<usize>) -> Result<Self> {
        let (rows, _) = matrix.dims2()?;
        if offset.dims() != [rows] || out_shape.iter().product::<usize>() != rows {
            return arg_err("affine decoder: matrix, offset and output shape disagree");
        }
        Ok(Self {
            matrix: matrix.to_dtype(DType::F64)?,
            offset: offset.to_dtype(DType::F64)?,
            out_shape,
        })
    }
}

impl LatentDecoder for AffineDecoder {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(0)?;
        let flat = z.to_dtype(DType::F64)?.flatten_from(1)?;
        let y = flat.matmul(&self.matrix.t()?)?.broadcast_add(&self.offset)?;
        let mut dims = vec![n, 1];
        dims.extend(&self.out_shape);
        Ok(y.reshape(dims)?)
    }
}

//! Seeded random streams. Every random draw in the crate goes through here so
//! that runs are reproducible from explicit seeds.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Result;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Standard-normal tensor drawn from `rng`.
pub fn normal_tensor<S: Into<Shape>>(
    rng: &mut SeededRng,
    shape: S,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let data = normal_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn uniform_tensor<S: Into<Shape>>(
    rng: &mut SeededRng,
    shape: S,
    low: f32,
    high: f32,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count())
        .map(|_| rng.random_range(low..high))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

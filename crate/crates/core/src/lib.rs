//! ControlNet-conditioned latent diffusion for paired image-to-image
//! translation: modality autoencoders, a latent denoising U-Net, a
//! zero-convolution ControlNet trained with a timestep-weighted image-space
//! loss, latent-averaging inference, estimator-bias diagnostics, and the
//! evaluation metrics used to score translated images.

pub mod analytic;
pub mod autoencoder;
pub mod checkpoint;
pub mod container;
pub mod controlnet;
pub mod denoiser;
mod error;
pub mod inference;
pub mod lasdiag;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub(crate) use error::{arg_err, ensure_same_dims};

pub use autoencoder::{LatentDistribution, Modality, ModalityVae, VaeConfig};
pub use controlnet::ControlNetDenoiser;
pub use denoiser::{DenoiserUNet, UNetConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use volume::Volume;

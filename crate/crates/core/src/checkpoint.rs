//! Model checkpoints: magic `CCLT`, a JSON header naming the training stage,
//! the architecture hyperparameters and a tensor directory, then the
//! parameters as `f32` regardless of compute precision.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::nn::Params;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCLT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Both modality autoencoders.
    Vae,
    /// Unconditional latent denoiser.
    Ldm,
    /// ControlNet plus the fine-tuned target decoder.
    Controlnet,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Vae => "vae",
            Stage::Ldm => "ldm",
            Stage::Controlnet => "controlnet",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub arch: serde_json::Value,
    pub params: Params,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::json!({
            "stage": self.stage,
            "arch": self.arch,
        }));
        for (name, var) in self.params.iter() {
            let data = var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            c.push(name.clone(), var.dims().to_vec(), data);
        }
        Ok(c)
    }

    pub fn from_container(c: Container, device: &Device) -> Result<Self> {
        let stage: Stage = serde_json::from_value(c.meta["stage"].clone())
            .map_err(|e| Error::Format(format!("checkpoint stage: {e}")))?;
        let arch = c.meta["arch"].clone();
        let mut params = Params::new();
        for (name, shape, data) in c.arrays {
            let t = Tensor::from_vec(data, shape, device)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            stage,
            arch,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let c = Container::from_bytes(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        Self::from_container(c, device)
    }

    /// The architecture section decoded as `T`.
    pub fn arch_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.arch.clone())
            .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?
        .save(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let c = Container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    Checkpoint::from_container(c, device)
}

/// Load and require a specific stage.
pub fn load_stage(path: &Path, expected: Stage, device: &Device) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path, device)?;
    if ckpt.stage != expected {
        return Err(Error::Stage(format!(
            "{} holds a {} checkpoint, expected {expected}",
            path.display(),
            ckpt.stage
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{Modality, ModalityVae, VaeConfig};

    fn bits(p: &Params) -> Vec<(String, Vec<u32>)> {
        p.iter()
            .map(|(k, v)| {
                let vals = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                (k.clone(), vals.iter().map(|x| x.to_bits()).collect())
            })
            .collect()
    }

    fn vae_checkpoint() -> Result<Checkpoint> {
        let cfg = VaeConfig::default();
        let vae = ModalityVae::new(&cfg, Modality::Target, 3, DType::F32, &Device::Cpu)?;
        Ok(Checkpoint {
            stage: Stage::Vae,
            arch: serde_json::to_value(&cfg)?,
            params: vae.params().clone(),
        })
    }

    #[test]
    fn save_load_is_bit_exact() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("vae.cclt");
        let ck = vae_checkpoint()?;
        save_checkpoint(&ck, &path)?;
        let back = load_checkpoint(&path, &Device::Cpu)?;
        assert_eq!(back.stage, Stage::Vae);
        assert_eq!(back.arch_as::<VaeConfig>()?, VaeConfig::default());
        assert_eq!(bits(&back.params), bits(&ck.params));
        let shapes: Vec<_> = back.params.iter().map(|(_, v)| v.dims().to_vec()).collect();
        let want: Vec<_> = ck.params.iter().map(|(_, v)| v.dims().to_vec()).collect();
        assert_eq!(shapes, want);
        // identical model state gives identical bytes
        assert_eq!(back.to_bytes()?, ck.to_bytes()?);
        Ok(())
    }

    #[test]
    fn corruption_and_stage_mismatch_rejected() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("vae.cclt");
        let ck = vae_checkpoint()?;
        save_checkpoint(&ck, &path)?;
        assert!(matches!(load_stage(&path, Stage::Controlnet, &Device::Cpu), Err(Error::Stage(_))));

        let mut bytes = std::fs::read(&path)?;
        let k = bytes.len() - 100;
        bytes[k] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes, &Device::Cpu), Err(Error::Integrity(_))));
        bytes[..4].copy_from_slice(b"CCDS");
        match Checkpoint::from_bytes(&bytes, &Device::Cpu) {
            Err(Error::Format(m)) => assert!(m.contains("CCLT") && m.contains("CCDS"), "{m}"),
            other => panic!("expected a format error, got {other:?}"),
        }
        Ok(())
    }
}

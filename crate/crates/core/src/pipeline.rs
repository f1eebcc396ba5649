//! Whole-dataset runs: stage training on the train split, checkpoint packing,
//! translation of a split and its evaluation.

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Modality, ModalityVae, VaeConfig};
use crate::checkpoint::{Checkpoint, Stage};
use crate::controlnet::ControlNetDenoiser;
use crate::denoiser::{DenoiserUNet, UNetConfig};
use crate::inference::{draw_latents, las_decode, unbiased_decode, CountingDecoder, ModelBundle};
use crate::metrics::{evaluate, select_threshold, EvalSpec, MetricReport, SsimParams};
use crate::nn::SpatialRank;
use crate::synthdata::{Dataset, DatasetManifest, Grid, Split, SubjectRecord};
use crate::training::{train_controlnet, train_ldm, train_vae, LossCurve, TrainConfig};
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Latent draws averaged per subject.
    pub m: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            m: 16,
            steps: 50,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config(format!("inference.m must be at least 1, got {}", self.m)));
        }
        if self.steps < 1 {
            return Err(Error::Config("inference.steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub n_perm: usize,
    pub seed: u64,
    /// SSIM window edge; the rank default when absent.
    #[serde(default)]
    pub ssim_window: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n_perm: 10_000,
            seed: 0,
            ssim_window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub vae: VaeConfig,
    pub unet: UNetConfig,
}

impl Architecture {
    pub fn for_grid(grid: Grid) -> Self {
        match grid {
            Grid::Planar64 => Self {
                vae: VaeConfig::default(),
                unet: UNetConfig::default(),
            },
            Grid::Cube32 => Self {
                vae: VaeConfig::volumetric(),
                unet: UNetConfig {
                    rank: SpatialRank::Three,
                    widths: vec![16, 32],
                    bottleneck: 64,
                    ..UNetConfig::default()
                },
            },
        }
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        self.vae.validate()?;
        self.unet.validate()?;
        if self.vae.rank.ndim() != grid.ndim() || self.vae.image_size != grid.shape()[0] {
            return Err(Error::Config(format!(
                "architecture.vae does not match the {grid} dataset grid"
            )));
        }
        if self.unet.rank != self.vae.rank || self.unet.latent_channels != self.vae.latent_channels {
            return Err(Error::Config(
                "architecture.unet rank and latent_channels must match architecture.vae".into(),
            ));
        }
        Ok(())
    }
}

/// Stage settings of the desk-scale recipe: batch 8, Adam at 1e-3, the
/// target latent held near unit scale by kl_weight 1e-2, linear WISL.
pub fn desk_train_config(stage: Stage, seed: u64) -> TrainConfig {
    let (epochs, kl_weight) = match stage {
        Stage::Vae => (30, 1e-2),
        Stage::Ldm => (60, 0.0),
        Stage::Controlnet => (150, 0.0),
    };
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        kl_weight,
        seed,
        ..TrainConfig::new(stage)
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoders {
    pub source: ModalityVae,
    pub target: ModalityVae,
}

fn train_split(ds: &Dataset) -> Vec<&SubjectRecord> {
    ds.split(Split::Train)
}

/// Stage A on the train split of a standardized dataset.
pub fn train_autoencoders(
    ds: &Dataset,
    arch: &VaeConfig,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(Autoencoders, LossCurve, LossCurve)> {
    let train = train_split(ds);
    let xs: Vec<&Volume> = train.iter().map(|r| &r.x).collect();
    let ys: Vec<&Volume> = train.iter().map(|r| &r.y).collect();
    let (source, cx) = train_vae(&xs, arch, Modality::Source, cfg, device)?;
    let (target, cy) = train_vae(&ys, arch, Modality::Target, cfg, device)?;
    Ok((Autoencoders { source, target }, cx, cy))
}

/// Stage C on target-modality train images.
pub fn train_denoiser(
    ae: &Autoencoders,
    ds: &Dataset,
    arch: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserUNet, LossCurve)> {
    let ys: Vec<&Volume> = train_split(ds).iter().map(|r| &r.y).collect();
    train_ldm(&ae.target, &ys, arch, cfg)
}

/// Stage D on train pairs. Returns the ControlNet and the target autoencoder
/// with its fine-tuned decoder.
pub fn train_translator(
    ae: &Autoencoders,
    unet: &DenoiserUNet,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ControlNetDenoiser, ModalityVae, LossCurve)> {
    let pairs: Vec<(&Volume, &Volume)> = train_split(ds).iter().map(|r| (&r.x, &r.y)).collect();
    train_controlnet(&ae.source, &ae.target, unet, &pairs, cfg)
}

pub fn pack_autoencoders(ae: &Autoencoders) -> Result<Checkpoint> {
    let mut params = ae.source.params().nested("source");
    params.extend(ae.target.params().nested("target"));
    Ok(Checkpoint {
        stage: Stage::Vae,
        arch: serde_json::json!({ "vae": ae.target.config() }),
        params,
    })
}

fn arch_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_value(ck.arch[key].clone())
        .map_err(|e| Error::Format(format!("{} checkpoint field {key}: {e}", ck.stage)))
}

pub fn unpack_autoencoders(ck: &Checkpoint, device: &Device) -> Result<Autoencoders> {
    expect(ck, Stage::Vae)?;
    let cfg: VaeConfig = arch_field(ck, "vae")?;
    Ok(Autoencoders {
        source: ModalityVae::from_params(&cfg, Modality::Source, ck.params.scoped("source"), device)?,
        target: ModalityVae::from_params(&cfg, Modality::Target, ck.params.scoped("target"), device)?,
    })
}

pub fn pack_denoiser(unet: &DenoiserUNet) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage: Stage::Ldm,
        arch: serde_json::json!({ "unet": unet.config() }),
        params: unet.params().clone(),
    })
}

pub fn unpack_denoiser(ck: &Checkpoint, device: &Device) -> Result<DenoiserUNet> {
    expect(ck, Stage::Ldm)?;
    DenoiserUNet::from_params(&arch_field(ck, "unet")?, ck.params.clone(), device)
}

pub fn pack_translator(cn: &ControlNetDenoiser, tuned: &ModalityVae) -> Result<Checkpoint> {
    let mut params = cn.params().nested("controlnet");
    params.extend(tuned.params().nested("target"));
    Ok(Checkpoint {
        stage: Stage::Controlnet,
        arch: serde_json::json!({
            "vae": tuned.config(),
            "unet": cn.backbone().config(),
            "backbone": cn.backbone_checksum(),
        }),
        params,
    })
}

/// Rebuild the ControlNet on `unet` and the tuned target autoencoder. The
/// denoiser must be the one the checkpoint was trained against.
pub fn unpack_translator(
    ck: &Checkpoint,
    unet: &DenoiserUNet,
    device: &Device,
) -> Result<(ControlNetDenoiser, ModalityVae)> {
    expect(ck, Stage::Controlnet)?;
    let want: String = arch_field(ck, "backbone")?;
    if unet.params().checksum()? != want {
        return Err(Error::Stage(
            "controlnet checkpoint was trained on a different denoiser; rerun train-controlnet".into(),
        ));
    }
    let cfg: VaeConfig = arch_field(ck, "vae")?;
    let cn = ControlNetDenoiser::from_params(unet, ck.params.scoped("controlnet"))?;
    let tuned = ModalityVae::from_params(&cfg, Modality::Target, ck.params.scoped("target"), device)?;
    Ok((cn, tuned))
}

fn expect(ck: &Checkpoint, stage: Stage) -> Result<()> {
    if ck.stage != stage {
        return Err(Error::Stage(format!("expected a {stage} checkpoint, found {}", ck.stage)));
    }
    Ok(())
}

/// Base seed for a subject's draws; subjects never share per-draw seeds for
/// `m < 2^20`.
pub fn subject_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_add((id as u64) << 20)
}

/// Estimates for one subject, all from the same latent draws.
#[derive(Clone, Debug)]
pub struct Translation {
    pub id: usize,
    /// Latent average over `m` draws.
    pub las: Volume,
    /// Decode of the first draw alone (the `m = 1` estimate).
    pub single: Volume,
    /// Image average over the same `m` draws, when requested.
    pub unbiased: Option<Volume>,
    pub las_decoder_calls: usize,
    pub unbiased_decoder_calls: usize,
}

pub fn translate_subject(bundle: &ModelBundle, x: &Volume, m: usize, seed: u64, unbiased: bool) -> Result<Translation> {
    let z_x = bundle.encode_source(x)?;
    let draws = draw_latents(bundle, &z_x, m, seed)?;
    let counter = CountingDecoder::new(bundle);
    let las = las_decode(&counter, &draws)?;
    let las_calls = counter.calls();
    let single = las_decode(bundle, &draws.narrow(0, 0, 1)?)?;
    let counter = CountingDecoder::new(bundle);
    let unbiased = if unbiased {
        Some(unbiased_decode(&counter, &draws)?)
    } else {
        None
    };
    Ok(Translation {
        id: 0,
        las,
        single,
        unbiased,
        las_decoder_calls: las_calls,
        unbiased_decoder_calls: counter.calls(),
    })
}

/// Translate every record with its subject seed.
pub fn translate_records(
    bundle: &ModelBundle,
    records: &[&SubjectRecord],
    cfg: &InferenceConfig,
    unbiased: bool,
) -> Result<Vec<Translation>> {
    cfg.validate()?;
    records
        .iter()
        .map(|r| {
            let t = translate_subject(bundle, &r.x, cfg.m, subject_seed(cfg.seed, r.id), unbiased)?;
            log::debug!("translated subject {}", r.id);
            Ok(Translation { id: r.id, ..t })
        })
        .collect()
}

/// Burden-unit positivity scores of standardized target-modality images.
pub fn burden_scores(manifest: &DatasetManifest, preds: &[Volume]) -> Result<Vec<f64>> {
    let masks = manifest.masks();
    preds.iter().map(|p| manifest.burden_score(p, &masks)).collect()
}

/// Threshold maximizing balanced accuracy of the predicted scores against the
/// records' labels (intended for the validation split).
pub fn select_validation_threshold(
    manifest: &DatasetManifest,
    preds: &[Volume],
    records: &[&SubjectRecord],
) -> Result<f64> {
    let scores = burden_scores(manifest, preds)?;
    let labels: Vec<bool> = records.iter().map(|r| r.positive).collect();
    select_threshold(&scores, &labels)
}

pub fn evaluate_predictions(
    manifest: &DatasetManifest,
    preds: &[Volume],
    records: &[&SubjectRecord],
    threshold: f64,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let stats = manifest
        .target_stats
        .ok_or_else(|| Error::Config("dataset has no target statistics".into()))?;
    let masks = manifest.masks();
    let map = manifest.burden_map;
    let score = move |c: f64| map.apply(c * stats.std + stats.mean);
    let truths: Vec<Volume> = records.iter().map(|r| r.y.clone()).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.positive).collect();
    let mut ssim = SsimParams::for_rank(manifest.grid.ndim());
    if let Some(w) = cfg.ssim_window {
        ssim.window = w;
    }
    let spec = EvalSpec {
        cortex: &masks.cortex,
        hippocampus: &masks.hippocampus,
        score: &score,
        threshold,
        labels: &labels,
        ssim,
        n_perm: cfg.n_perm,
        seed: cfg.seed,
    };
    evaluate(preds, &truths, &spec)
}

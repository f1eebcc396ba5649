//! Training stages: modality autoencoders, the unconditional latent denoiser,
//! and the ControlNet with its timestep-weighted image-space loss.
//!
//! Every stage is a single sequential loop. A stage's master generator is
//! seeded from the config; it drives the per-epoch shuffles and the per-step
//! noise seeds, so a fixed seed reproduces the run exactly.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{scalar, vae_loss, Modality, ModalityVae, VaeConfig};
use crate::checkpoint::Stage;
use crate::controlnet::ControlNetDenoiser;
use crate::denoiser::{DenoiserUNet, UNetConfig};
use crate::nn::adam;
use crate::rng::{self, SeededRng};
use crate::schedule::{forward_diffuse_batch, recover_z0_batch, NoiseSchedule, ScheduleConfig};
use crate::volume::Volume;
use crate::{arg_err, ensure_same_dims, Error, Result};

/// Image-space loss weighting for stage D.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WislMode {
    /// No image-space term; the decoder stays frozen.
    Off,
    /// Weight fixed at 1 for every timestep.
    ConstantIsl,
    /// Weight `(T - t) / T`.
    #[default]
    LinearWisl,
}

impl WislMode {
    pub fn weight(self, t: usize, total: usize) -> Result<f64> {
        let lam = lambda_weight(t, total)?;
        Ok(match self {
            WislMode::Off => 0.0,
            WislMode::ConstantIsl => 1.0,
            WislMode::LinearWisl => lam,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub kl_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub wisl: WislMode,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-4,
            kl_weight: 0.0,
            seed: 0,
            schedule: ScheduleConfig::default(),
            wisl: WislMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Stage(format!(
                "config is for stage {}, runner is {stage}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Per-step training losses with named columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub columns: Vec<String>,
    /// `(epoch, step, values)`.
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl LossCurve {
    fn with_columns(cols: &[&str]) -> Self {
        Self {
            columns: cols.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,step,{}\n", self.columns.join(","));
        for (e, st, v) in &self.rows {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            s.push_str(&format!("{e},{st},{}\n", vals.join(",")));
        }
        s
    }

    /// Mean of column `col` within each epoch, in epoch order.
    pub fn epoch_means(&self, col: usize) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for (e, _, v) in &self.rows {
            if out.len() <= *e {
                out.resize(*e + 1, (0.0, 0));
            }
            out[*e].0 += v[col];
            out[*e].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// `(T - t) / T` for `0 <= t <= T`.
pub fn lambda_weight(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return arg_err(format!("timestep {t} outside 0..={total}"));
    }
    Ok((total - t) as f64 / total as f64)
}

/// Weighted mean absolute error between a target image and a decoded estimate.
pub fn wisl_loss(y: &Volume, decoded: &Volume, t: usize, total: usize, mode: WislMode) -> Result<f64> {
    ensure_same_dims(y.shape(), decoded.shape(), "wisl_loss")?;
    let w = mode.weight(t, total)?;
    let l1: f64 = y
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / y.len() as f64;
    Ok(w * l1)
}

/// Batched image-space loss: mean over samples of `w(t_b) * mean|y_b - d_b|`.
fn wisl_loss_tensor(y: &Tensor, decoded: &Tensor, ts: &[usize], total: usize, mode: WislMode) -> Result<Tensor> {
    ensure_same_dims(y.dims(), decoded.dims(), "wisl_loss")?;
    let b = y.dim(0)?;
    let weights = ts
        .iter()
        .map(|&t| mode.weight(t, total))
        .collect::<Result<Vec<f64>>>()?;
    let w = Tensor::from_vec(weights, b, y.device())?.to_dtype(y.dtype())?;
    let per = (y - decoded)?.abs()?.flatten_from(1)?.mean(1)?;
    Ok((per * w)?.mean_all()?)
}

fn draw_timesteps(r: &mut SeededRng, n: usize, total: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(1..=total)).collect()
}

/// Noise-prediction loss at uniformly drawn timesteps in `1..=T`.
pub fn ldm_loss(unet: &DenoiserUNet, sched: &NoiseSchedule, z0: &Tensor, seed: u64) -> Result<Tensor> {
    ldm_loss_with(|z_t, ts| unet.forward(z_t, ts), sched, z0, seed)
}

/// [`ldm_loss`] for any noise predictor `(z_t, ts) -> eps_hat`.
pub fn ldm_loss_with(
    predict: impl Fn(&Tensor, &[usize]) -> Result<Tensor>,
    sched: &NoiseSchedule,
    z0: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let mut r = rng::seeded(seed);
    let n = z0.dim(0)?;
    let ts = draw_timesteps(&mut r, n, sched.num_steps());
    let eps = rng::normal_tensor(&mut r, z0.dims(), z0.dtype(), z0.device())?;
    let z_t = forward_diffuse_batch(z0, &ts, &eps, sched)?;
    let pred = predict(&z_t, &ts)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// A stage-D minibatch: source latent means, target latents, target images.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub z_x: Tensor,
    pub z_y: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WcnLosses {
    pub cn: f64,
    pub wisl: f64,
    /// Reported as `cn + wisl` in f64.
    pub wcn: f64,
}

/// Differentiable combined loss and its logged components.
pub fn wcn_loss(
    cn: &ControlNetDenoiser,
    target: &ModalityVae,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    mode: WislMode,
    seed: u64,
) -> Result<(Tensor, WcnLosses)> {
    let mut r = rng::seeded(seed);
    let n = batch.z_y.dim(0)?;
    let ts = draw_timesteps(&mut r, n, sched.num_steps());
    let eps = rng::normal_tensor(&mut r, batch.z_y.dims(), batch.z_y.dtype(), batch.z_y.device())?;
    let z_t = forward_diffuse_batch(&batch.z_y, &ts, &eps, sched)?;
    let eps_hat = cn.forward(&z_t, &ts, &batch.z_x)?;
    let l_cn = (&eps_hat - &eps)?.sqr()?.mean_all()?;
    if mode == WislMode::Off {
        let v = scalar(&l_cn)?;
        return Ok((l_cn, WcnLosses { cn: v, wisl: 0.0, wcn: v }));
    }
    let z0_hat = recover_z0_batch(&z_t, &eps_hat, &ts, sched)?;
    let decoded = target.decode(&z0_hat)?;
    let l_wisl = wisl_loss_tensor(&batch.y, &decoded, &ts, sched.num_steps(), mode)?;
    let (cn_v, wisl_v) = (scalar(&l_cn)?, scalar(&l_wisl)?);
    let total = (l_cn + l_wisl)?;
    Ok((
        total,
        WcnLosses {
            cn: cn_v,
            wisl: wisl_v,
            wcn: cn_v + wisl_v,
        },
    ))
}

/// Optimizer over the stage-D trainable set: the ControlNet parameters, plus
/// the target decoder unless the image-space loss is off.
pub fn wcn_optimizer(cn: &ControlNetDenoiser, target: &ModalityVae, cfg: &TrainConfig) -> Result<AdamW> {
    let mut vars = cn.trainable_vars();
    if cfg.wisl != WislMode::Off {
        vars.extend(target.decoder_vars());
    }
    adam(vars, cfg.learning_rate)
}

/// One optimizer step on the combined loss.
pub fn wcn_train_step(
    cn: &ControlNetDenoiser,
    target: &ModalityVae,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    seed: u64,
) -> Result<WcnLosses> {
    let (loss, parts) = wcn_loss(cn, target, batch, sched, cfg.wisl, seed)?;
    opt.backward_step(&loss)?;
    Ok(parts)
}

fn shuffled(r: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn index(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, ids.len(), t.device())?;
    Ok(t.contiguous()?.index_select(&idx, 0)?)
}

/// Posterior means and log-variances of a frozen encoder, in input order.
pub fn encode_all(vae: &ModalityVae, images: &[&Volume]) -> Result<(Tensor, Tensor)> {
    let mut means = Vec::new();
    let mut logvars = Vec::new();
    for chunk in images.chunks(32) {
        let x = Volume::stack(chunk, vae.dtype(), vae.device())?;
        let (dist, _) = vae.encode(&x, None)?;
        means.push(dist.mean.detach().contiguous()?);
        logvars.push(dist.logvar.detach().contiguous()?);
    }
    Ok((Tensor::cat(&means, 0)?, Tensor::cat(&logvars, 0)?))
}

fn require_nonempty<T>(items: &[T]) -> Result<()> {
    if items.is_empty() {
        return arg_err("training split is empty");
    }
    Ok(())
}

/// Stage A: one modality autoencoder on the given (standardized) images.
pub fn train_vae(
    images: &[&Volume],
    vae_cfg: &VaeConfig,
    modality: Modality,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(ModalityVae, LossCurve)> {
    cfg.expect_stage(Stage::Vae)?;
    require_nonempty(images)?;
    let salt = match modality {
        Modality::Source => 0,
        Modality::Target => 1,
    };
    let seed = cfg.seed.wrapping_mul(2).wrapping_add(salt);
    let vae = ModalityVae::new(vae_cfg, modality, seed, DType::F32, device)?;
    let data = Volume::stack(images, DType::F32, device)?;
    let mut opt = adam(vae.params().vars(), cfg.learning_rate)?;
    let mut r = rng::seeded(seed);
    let mut curve = LossCurve::with_columns(&["loss", "reconstruction", "kl"]);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for ids in shuffled(&mut r, images.len()).chunks(cfg.batch_size) {
            let x = index(&data, ids)?;
            let l = vae_loss(&vae, &x, cfg.kl_weight, r.next_u64())?;
            opt.backward_step(&l.total)?;
            curve.rows.push((epoch, step, vec![scalar(&l.total)?, l.reconstruction, l.kl]));
            step += 1;
        }
        log::info!("vae {modality:?} epoch {epoch}: {:?}", curve.rows.last().map(|r| &r.2));
    }
    Ok((vae, curve))
}

/// Stage C: unconditional denoiser on reparameterized latents of the frozen
/// target encoder.
pub fn train_ldm(
    target: &ModalityVae,
    images: &[&Volume],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserUNet, LossCurve)> {
    cfg.expect_stage(Stage::Ldm)?;
    require_nonempty(images)?;
    let sched = cfg.schedule.build()?;
    let (mean, logvar) = encode_all(target, images)?;
    let std = logvar.affine(0.5, 0.0)?.exp()?;
    let unet = DenoiserUNet::new(unet_cfg, cfg.seed, DType::F32, target.device())?;
    let mut opt = adam(unet.params().vars(), cfg.learning_rate)?;
    let mut r = rng::seeded(cfg.seed);
    let mut curve = LossCurve::with_columns(&["loss"]);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for ids in shuffled(&mut r, images.len()).chunks(cfg.batch_size) {
            let (m, s) = (index(&mean, ids)?, index(&std, ids)?);
            let noise = rng::normal_tensor(&mut r, m.dims(), m.dtype(), m.device())?;
            let z0 = (m + (s * noise)?)?;
            let loss = ldm_loss(&unet, &sched, &z0, r.next_u64())?;
            opt.backward_step(&loss)?;
            curve.rows.push((epoch, step, vec![scalar(&loss)?]));
            step += 1;
        }
        log::info!("ldm epoch {epoch}: {:?}", curve.epoch_means(0).last());
    }
    Ok((unet, curve))
}

/// Stage D: ControlNet on a frozen denoiser, with the target decoder
/// fine-tuned through the image-space loss. Returns the ControlNet and the
/// target autoencoder carrying the fine-tuned decoder; the inputs are not
/// modified.
pub fn train_controlnet(
    source: &ModalityVae,
    target: &ModalityVae,
    unet: &DenoiserUNet,
    pairs: &[(&Volume, &Volume)],
    cfg: &TrainConfig,
) -> Result<(ControlNetDenoiser, ModalityVae, LossCurve)> {
    cfg.expect_stage(Stage::Controlnet)?;
    require_nonempty(pairs)?;
    let sched = cfg.schedule.build()?;
    let xs: Vec<&Volume> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<&Volume> = pairs.iter().map(|p| p.1).collect();
    let (zx, _) = encode_all(source, &xs)?;
    let (my, lvy) = encode_all(target, &ys)?;
    let sy = lvy.affine(0.5, 0.0)?.exp()?;
    let y_all = Volume::stack(&ys, target.dtype(), target.device())?;

    let tuned = ModalityVae::from_params(
        target.config(),
        target.modality(),
        target.params().deep_clone()?,
        target.device(),
    )?;
    let cn = ControlNetDenoiser::new(unet)?;
    let mut opt = wcn_optimizer(&cn, &tuned, cfg)?;
    let mut r = rng::seeded(cfg.seed);
    let mut curve = LossCurve::with_columns(&["l_cn", "l_wisl", "l_wcn"]);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for ids in shuffled(&mut r, pairs.len()).chunks(cfg.batch_size) {
            let m = index(&my, ids)?;
            let noise = rng::normal_tensor(&mut r, m.dims(), m.dtype(), m.device())?;
            let batch = PairBatch {
                z_x: index(&zx, ids)?,
                z_y: (m + (index(&sy, ids)? * noise)?)?,
                y: index(&y_all, ids)?,
            };
            let l = wcn_train_step(&cn, &tuned, &batch, &sched, cfg, &mut opt, r.next_u64())?;
            curve.rows.push((epoch, step, vec![l.cn, l.wisl, l.wcn]));
            step += 1;
        }
        log::info!("controlnet epoch {epoch}: {:?}", curve.epoch_means(2).last());
    }
    Ok((cn, tuned, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SpatialRank;

    fn tiny_vae_cfg() -> VaeConfig {
        VaeConfig {
            rank: SpatialRank::Two,
            image_size: 16,
            channels: [4, 8],
            latent_channels: 4,
        }
    }

    fn overfit_unet_cfg() -> UNetConfig {
        UNetConfig {
            rank: SpatialRank::Two,
            latent_channels: 4,
            widths: vec![32],
            bottleneck: 32,
            time_dim: 32,
            groups: 8,
        }
    }

    fn tiny_unet_cfg() -> UNetConfig {
        UNetConfig {
            rank: SpatialRank::Two,
            latent_channels: 4,
            widths: vec![8],
            bottleneck: 8,
            time_dim: 8,
            groups: 4,
        }
    }

    fn images(n: usize, seed: u64) -> Vec<Volume> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let a: f32 = r.random_range(-1.0..1.0);
                let f: f32 = r.random_range(0.2..0.6);
                Volume::from_fn(&[16, 16], |i| a * ((i / 16) as f32 * f).sin() + 0.3 * ((i % 16) as f32 * f).cos())
            })
            .collect()
    }

    fn stage_cfg(stage: Stage, epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: lr,
            kl_weight: 1e-3,
            seed: 17,
            ..TrainConfig::new(stage)
        }
    }

    #[test]
    fn lambda_cases_and_monotonicity() -> Result<()> {
        assert_eq!(lambda_weight(1000, 1000)?, 0.0);
        assert_eq!(lambda_weight(0, 1000)?, 1.0);
        assert_eq!(lambda_weight(500, 1000)?, 0.5);
        assert!(matches!(lambda_weight(1001, 1000), Err(Error::Argument(_))));
        for t in 0..1000 {
            assert!(lambda_weight(t + 1, 1000)? < lambda_weight(t, 1000)?);
        }
        Ok(())
    }

    #[test]
    fn wisl_cases() -> Result<()> {
        let y = Volume::new(vec![2], vec![1.0, 2.0])?;
        let d = Volume::new(vec![2], vec![0.0, 0.0])?;
        assert_eq!(wisl_loss(&y, &d, 500, 1000, WislMode::LinearWisl)?, 0.75);
        assert_eq!(wisl_loss(&y, &d, 1000, 1000, WislMode::LinearWisl)?, 0.0);
        assert_eq!(wisl_loss(&y, &d, 1000, 1000, WislMode::ConstantIsl)?, 1.5);
        assert_eq!(wisl_loss(&y, &d, 10, 1000, WislMode::Off)?, 0.0);
        for t in [0, 1, 999] {
            assert_eq!(wisl_loss(&y, &y, t, 1000, WislMode::LinearWisl)?, 0.0);
        }
        let bad = Volume::new(vec![3], vec![0.0; 3])?;
        assert!(matches!(wisl_loss(&y, &bad, 1, 1000, WislMode::LinearWisl), Err(Error::Argument(_))));
        Ok(())
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Stage::Ldm);
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"stage":"ldm","epochs":1,"batch_size":1,"learning_rate":1e-4,"seed":0,"wisl":"sometimes"}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn ldm_loss_anchors() -> Result<()> {
        let dev = Device::Cpu;
        let sched = ScheduleConfig::default().build()?;
        let unet = DenoiserUNet::new(&tiny_unet_cfg(), 1, DType::F32, &dev)?;
        let z0 = rng::normal_tensor(&mut rng::seeded(2), (16, 4, 4, 4), DType::F32, &dev)?;
        // zero-initialized output: loss is the mean of eps^2 over 1024 elements
        let l = scalar(&ldm_loss(&unet, &sched, &z0, 3)?)?;
        assert!((l - 1.0).abs() < 0.05 * 1.0 + 0.05, "{l}");
        assert_eq!(l, scalar(&ldm_loss(&unet, &sched, &z0, 3)?)?);

        // an oracle that inverts the forward process returns the drawn noise exactly
        let z0_64 = z0.to_dtype(DType::F64)?;
        let oracle = |z_t: &Tensor, ts: &[usize]| -> Result<Tensor> {
            let a: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
            let s: Vec<f64> = ts.iter().map(|&t| 1.0 / (1.0 - sched.alpha_bar(t)).sqrt()).collect();
            let a = Tensor::from_vec(a, (ts.len(), 1, 1, 1), &dev)?;
            let s = Tensor::from_vec(s, (ts.len(), 1, 1, 1), &dev)?;
            Ok((z_t - z0_64.broadcast_mul(&a)?)?.broadcast_mul(&s)?)
        };
        let l = scalar(&ldm_loss_with(oracle, &sched, &z0_64, 3)?)?;
        assert!(l < 1e-20, "{l}");
        Ok(())
    }

    #[test]
    fn ldm_overfits_four_latents() -> Result<()> {
        let dev = Device::Cpu;
        let sched = ScheduleConfig::default().build()?;
        let unet = DenoiserUNet::new(&overfit_unet_cfg(), 4, DType::F32, &dev)?;
        let z0 = rng::normal_tensor(&mut rng::seeded(5), (4, 4, 4, 4), DType::F32, &dev)?;
        // the four latents, each visited eight times per step
        let z0 = Tensor::cat(&[&z0; 8], 0)?;
        let mut opt = adam(unet.params().vars(), 3e-3)?;
        let eval = |seed_base: u64| -> Result<f64> {
            let mut s = 0.0;
            for k in 0..8 {
                s += scalar(&ldm_loss(&unet, &sched, &z0, seed_base + k)?)?;
            }
            Ok(s / 8.0)
        };
        let initial = eval(1000)?;
        for step in 0..500 {
            let loss = ldm_loss(&unet, &sched, &z0, step)?;
            opt.backward_step(&loss)?;
        }
        let fin = eval(1000)?;
        assert!(fin < 0.1 * initial, "{initial} -> {fin}");
        Ok(())
    }

    fn tiny_models(dtype: DType) -> Result<(ModalityVae, ModalityVae, DenoiserUNet)> {
        let dev = Device::Cpu;
        let src = ModalityVae::new(&tiny_vae_cfg(), Modality::Source, 1, dtype, &dev)?;
        let tgt = ModalityVae::new(&tiny_vae_cfg(), Modality::Target, 2, dtype, &dev)?;
        let unet = DenoiserUNet::new(&tiny_unet_cfg(), 3, dtype, &dev)?;
        let mut r = rng::seeded(4);
        for name in ["decoder.conv_out.weight", "decoder.conv_out.bias"] {
            let v = unet.params().get(name).unwrap();
            v.set(&rng::normal_tensor(&mut r, v.dims(), dtype, &dev)?.affine(0.1, 0.0)?)?;
        }
        Ok((src, tgt, unet))
    }

    fn pair_batch(src: &ModalityVae, tgt: &ModalityVae, xs: &[Volume], ys: &[Volume]) -> Result<PairBatch> {
        let xr: Vec<&Volume> = xs.iter().collect();
        let yr: Vec<&Volume> = ys.iter().collect();
        Ok(PairBatch {
            z_x: encode_all(src, &xr)?.0,
            z_y: encode_all(tgt, &yr)?.0,
            y: Volume::stack(&yr, tgt.dtype(), tgt.device())?,
        })
    }

    #[test]
    fn wcn_step_decomposes_and_freezes_backbone() -> Result<()> {
        let (src, tgt, unet) = tiny_models(DType::F32)?;
        let xs = images(4, 10);
        let ys = images(4, 11);
        let batch = pair_batch(&src, &tgt, &xs, &ys)?;
        let sched = ScheduleConfig::default().build()?;
        let cfg = stage_cfg(Stage::Controlnet, 1, 1e-3);
        let cn = ControlNetDenoiser::new(&unet)?;
        let before = unet.params().checksum()?;
        let src_before = src.params().checksum()?;
        let enc_before = tgt.params().vars_with_prefix("encoder").len();
        let mut opt = wcn_optimizer(&cn, &tgt, &cfg)?;
        for step in 0..100 {
            let l = wcn_train_step(&cn, &tgt, &batch, &sched, &cfg, &mut opt, step)?;
            assert_eq!(l.wcn, l.cn + l.wisl);
            assert!(l.wisl >= 0.0);
        }
        assert_eq!(unet.params().checksum()?, before);
        assert_eq!(src.params().checksum()?, src_before);
        assert_eq!(tgt.params().vars_with_prefix("encoder").len(), enc_before);
        Ok(())
    }

    #[test]
    fn wcn_first_step_noise_anchor() -> Result<()> {
        let dev = Device::Cpu;
        let (src, tgt, _) = tiny_models(DType::F32)?;
        // fresh backbone: zero output, so the ControlNet predicts zero too
        let unet = DenoiserUNet::new(&tiny_unet_cfg(), 9, DType::F32, &dev)?;
        let cn = ControlNetDenoiser::new(&unet)?;
        let xs = images(16, 12);
        let ys = images(16, 13);
        let batch = pair_batch(&src, &tgt, &xs, &ys)?;
        let sched = ScheduleConfig::default().build()?;
        let (_, l) = wcn_loss(&cn, &tgt, &batch, &sched, WislMode::LinearWisl, 1)?;
        // 16 * 4 * 4 * 4 = 1024 noise elements
        assert!((l.cn - 1.0).abs() < 0.05 + 0.05, "{}", l.cn);
        Ok(())
    }

    #[test]
    fn wcn_overfits_four_pairs() -> Result<()> {
        let (src, tgt, _) = tiny_models(DType::F32)?;
        let xs = images(4, 20);
        let ys = images(4, 21);
        // stage D starts from a trained target autoencoder
        let y_all = Volume::stack(&ys.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
        let mut opt = adam(tgt.params().vars(), 3e-3)?;
        for step in 0..300 {
            opt.backward_step(&vae_loss(&tgt, &y_all, 1e-3, step)?.total)?;
        }
        let b = pair_batch(&src, &tgt, &xs, &ys)?;
        let rep = |t: &Tensor| Tensor::cat(&[t; 4], 0);
        let batch = PairBatch { z_x: rep(&b.z_x)?, z_y: rep(&b.z_y)?, y: rep(&b.y)? };
        let sched = ScheduleConfig::default().build()?;
        // a generic backbone trained on unrelated latents
        let unet = DenoiserUNet::new(&overfit_unet_cfg(), 6, DType::F32, &Device::Cpu)?;
        let other = rng::normal_tensor(&mut rng::seeded(7), (16, 4, 4, 4), DType::F32, &Device::Cpu)?;
        let mut opt = adam(unet.params().vars(), 3e-3)?;
        for step in 0..100 {
            opt.backward_step(&ldm_loss(&unet, &sched, &other, 900 + step)?)?;
        }
        let cfg = stage_cfg(Stage::Controlnet, 1, 3e-3);
        let cn = ControlNetDenoiser::new(&unet)?;
        let eval = || -> Result<f64> {
            let mut s = 0.0;
            for k in 0..16 {
                s += wcn_loss(&cn, &tgt, &batch, &sched, cfg.wisl, 5000 + k)?.1.wcn;
            }
            Ok(s / 16.0)
        };
        let initial = eval()?;
        let mut opt = wcn_optimizer(&cn, &tgt, &cfg)?;
        for step in 0..500 {
            wcn_train_step(&cn, &tgt, &batch, &sched, &cfg, &mut opt, step)?;
        }
        let fin = eval()?;
        assert!(fin < 0.25 * initial, "{initial} -> {fin}");
        Ok(())
    }

    #[test]
    fn wisl_off_keeps_decoder_frozen() -> Result<()> {
        let (src, tgt, unet) = tiny_models(DType::F32)?;
        let batch = pair_batch(&src, &tgt, &images(4, 30), &images(4, 31))?;
        let sched = ScheduleConfig::default().build()?;
        let cfg = TrainConfig { wisl: WislMode::Off, ..stage_cfg(Stage::Controlnet, 1, 1e-3) };
        let cn = ControlNetDenoiser::new(&unet)?;
        let before = tgt.params().checksum()?;
        let mut opt = wcn_optimizer(&cn, &tgt, &cfg)?;
        for step in 0..5 {
            let l = wcn_train_step(&cn, &tgt, &batch, &sched, &cfg, &mut opt, step)?;
            assert_eq!(l.wisl, 0.0);
            assert_eq!(l.wcn, l.cn);
        }
        assert_eq!(tgt.params().checksum()?, before);
        Ok(())
    }

    #[test]
    fn wisl_gradient_matches_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let (src, tgt, unet) = tiny_models(DType::F64)?;
        let cn = ControlNetDenoiser::new(&unet)?;
        let mut r = rng::seeded(40);
        // wake the zero convolutions so the copy receives gradient
        for (name, v) in cn.params().iter() {
            if name.starts_with("zero_") {
                v.set(&rng::normal_tensor(&mut r, v.dims(), DType::F64, &dev)?.affine(0.1, 0.0)?)?;
            }
        }
        let xs = images(2, 41);
        let ys = images(2, 42);
        let xr: Vec<&Volume> = xs.iter().collect();
        let yr: Vec<&Volume> = ys.iter().collect();
        let batch = PairBatch {
            z_x: encode_all(&src, &xr)?.0,
            z_y: encode_all(&tgt, &yr)?.0,
            y: Volume::stack(&yr, DType::F64, &dev)?,
        };
        let sched = ScheduleConfig::default().build()?;
        // the image-space term alone, at a fixed draw
        let loss_fn = || -> Result<Tensor> {
            let (total, _) = wcn_loss(&cn, &tgt, &batch, &sched, WislMode::LinearWisl, 7)?;
            let (l_cn, _) = wcn_loss(&cn, &tgt, &batch, &sched, WislMode::Off, 7)?;
            Ok((total - l_cn)?)
        };
        let grads = loss_fn()?.backward()?;
        let mut checked = 0;
        for name in ["copy.conv_in.weight", "zero_out0.weight", "decoder.conv_out.weight", "decoder.up1.weight"] {
            let var = cn
                .params()
                .get(name)
                .or_else(|| tgt.params().get(name))
                .unwrap()
                .clone();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
            let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            for idx in [0usize, base.len() / 2, base.len() - 1] {
                let h = 1e-6;
                let mut p = base.clone();
                p[idx] += h;
                var.set(&Tensor::from_vec(p, var.dims(), &dev)?)?;
                let lp = scalar(&loss_fn()?)?;
                let mut m = base.clone();
                m[idx] -= h;
                var.set(&Tensor::from_vec(m, var.dims(), &dev)?)?;
                let lm = scalar(&loss_fn()?)?;
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &dev)?)?;
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g[idx].abs()).max(1e-8);
                assert!((fd - g[idx]).abs() / denom < 1e-3, "{name}[{idx}] fd {fd} vs {}", g[idx]);
                checked += 1;
            }
        }
        assert_eq!(checked, 12);
        Ok(())
    }

    fn param_bits(p: &crate::nn::Params) -> Vec<u32> {
        p.iter()
            .flat_map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .map(f32::to_bits)
            .collect()
    }

    #[test]
    fn stage_runners_are_deterministic_and_reduce_loss() -> Result<()> {
        let dev = Device::Cpu;
        let xs = images(12, 50);
        let ys = images(12, 51);
        let xr: Vec<&Volume> = xs.iter().collect();
        let yr: Vec<&Volume> = ys.iter().collect();
        let vcfg = stage_cfg(Stage::Vae, 15, 3e-3);
        let (src, c1) = train_vae(&xr, &tiny_vae_cfg(), Modality::Source, &vcfg, &dev)?;
        let (src2, _) = train_vae(&xr, &tiny_vae_cfg(), Modality::Source, &vcfg, &dev)?;
        assert_eq!(param_bits(src.params()), param_bits(src2.params()));
        let m = c1.epoch_means(0);
        assert!(m.last() < m.first(), "{m:?}");
        let (tgt, _) = train_vae(&yr, &tiny_vae_cfg(), Modality::Target, &vcfg, &dev)?;

        let lcfg = stage_cfg(Stage::Ldm, 15, 3e-3);
        let (unet, c2) = train_ldm(&tgt, &yr, &tiny_unet_cfg(), &lcfg)?;
        let (unet2, _) = train_ldm(&tgt, &yr, &tiny_unet_cfg(), &lcfg)?;
        assert_eq!(param_bits(unet.params()), param_bits(unet2.params()));
        let m = c2.epoch_means(0);
        assert!(m.last() < m.first(), "{m:?}");

        let pairs: Vec<(&Volume, &Volume)> = xs.iter().zip(&ys).collect();
        let ccfg = stage_cfg(Stage::Controlnet, 6, 1e-3);
        let (cn, dec, c3) = train_controlnet(&src, &tgt, &unet, &pairs, &ccfg)?;
        let (cn2, dec2, _) = train_controlnet(&src, &tgt, &unet, &pairs, &ccfg)?;
        assert_eq!(param_bits(cn.params()), param_bits(cn2.params()));
        assert_eq!(param_bits(dec.params()), param_bits(dec2.params()));
        assert_ne!(param_bits(dec.params()), param_bits(tgt.params()));
        let m = c3.epoch_means(2);
        assert!(m.last() < m.first(), "{m:?}");
        for (_, _, v) in &c3.rows {
            assert!((v[2] - (v[0] + v[1])).abs() <= 1e-12);
        }

        let base_cfg = TrainConfig { wisl: WislMode::Off, ..ccfg.clone() };
        let (cn_base, dec_base, _) = train_controlnet(&src, &tgt, &unet, &pairs, &base_cfg)?;
        assert_ne!(param_bits(cn_base.params()), param_bits(cn.params()));
        assert_eq!(param_bits(dec_base.params()), param_bits(tgt.params()));

        assert!(matches!(train_ldm(&tgt, &yr, &tiny_unet_cfg(), &vcfg), Err(Error::Stage(_))));
        Ok(())
    }
}

//! Subcommand implementations.

use std::path::Path;

use anyhow::Context;
use candle_core::Device;
use latent_translate::checkpoint::{load_stage, save_checkpoint, Stage};
use latent_translate::inference::ModelBundle;
use latent_translate::lasdiag::{empirical_bias_curve, run_linearity_suite, BiasConfig};
use latent_translate::pipeline::{
    evaluate_predictions, pack_autoencoders, pack_denoiser, pack_translator, select_validation_threshold,
    train_autoencoders, train_denoiser, train_translator, translate_records, unpack_autoencoders, unpack_denoiser,
    unpack_translator,
};
use latent_translate::synthdata::{gen_dataset, load_volume, save_volume, Dataset, GeneratorParams, Grid, Split};
use latent_translate::training::WislMode;
use latent_translate::Volume;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::rundir::{RunDir, CONTROLNET_CHECKPOINT, LDM_CHECKPOINT, THRESHOLD_FILE, VAE_CHECKPOINT};
use crate::{CliError, Command, SplitArg, WislArg};

pub const DEFAULT_SPLITS: (f64, f64, f64) = (0.8, 0.05, 0.15);

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { n, seed, grid, out } => gen_data(n, seed, &grid, &out),
        Command::InitConfig {
            dataset,
            run_dir,
            seed,
            out,
        } => {
            std::fs::write(&out, RunConfig::desk(dataset, run_dir, seed).to_toml())
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::TrainVae { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.stages.vae.seed = s;
            }
            train_vae_cmd(&cfg, "train-vae")
        }
        Command::TrainLdm { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.stages.ldm.seed = s;
            }
            train_ldm_cmd(&cfg, "train-ldm")
        }
        Command::TrainControlnet { config, seed, wisl } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.stages.controlnet.seed = s;
            }
            if let Some(w) = wisl {
                cfg.stages.controlnet.wisl = match w {
                    WislArg::Off => WislMode::Off,
                    WislArg::ConstantIsl => WislMode::ConstantIsl,
                    WislArg::LinearWisl => WislMode::LinearWisl,
                };
            }
            train_controlnet_cmd(&cfg, "train-controlnet")
        }
        Command::Infer {
            config,
            input,
            out,
            m,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            override_inference(&mut cfg, m, seed, steps);
            infer_cmd(&cfg, &input, &out)
        }
        Command::Evaluate { config, split, m, seed } => {
            let mut cfg = load_config(&config)?;
            override_inference(&mut cfg, m, seed, None);
            evaluate_cmd(&cfg, split)
        }
        Command::Diagnose { config } => diagnose_cmd(&load_config(&config)?),
    }
}

fn override_inference(cfg: &mut RunConfig, m: Option<usize>, seed: Option<u64>, steps: Option<usize>) {
    if let Some(m) = m {
        cfg.inference.m = m;
    }
    if let Some(s) = seed {
        cfg.inference.seed = s;
    }
    if let Some(s) = steps {
        cfg.inference.steps = s;
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::load(path)
}

fn gen_data(n: usize, seed: u64, grid: &str, out: &Path) -> Result<(), CliError> {
    let grid: Grid = grid.parse()?;
    let ds = gen_dataset(n, seed, grid, DEFAULT_SPLITS, &GeneratorParams::default())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    let m = &ds.manifest;
    println!(
        "wrote {} subjects ({} train, {} val, {} test) to {}",
        n,
        m.train.len(),
        m.val.len(),
        m.test.len(),
        out.display()
    );
    Ok(())
}

/// Validate the config, check the dataset path, take the run directory and
/// record the resolved config there.
fn start(cfg: &RunConfig, command: &str) -> Result<(RunDir, Dataset), CliError> {
    cfg.validate()?;
    if !cfg.paths.dataset.is_file() {
        return Err(CliError::Usage(format!(
            "config key `paths.dataset`: {} does not exist (run gen-data first)",
            cfg.paths.dataset.display()
        )));
    }
    let dir = RunDir::open(&cfg.paths.run_dir)?;
    dir.write(&format!("{command}.config.toml"), &cfg.to_toml())?;
    let ds = Dataset::load(&cfg.paths.dataset)
        .with_context(|| format!("loading {}", cfg.paths.dataset.display()))?
        .standardized()?;
    cfg.architecture(ds.manifest.grid)?;
    Ok((dir, ds))
}

fn train_vae_cmd(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, command)?;
    let arch = cfg.architecture(ds.manifest.grid)?;
    let (ae, cx, cy) = train_autoencoders(&ds, &arch.vae, &cfg.train_config(Stage::Vae), &Device::Cpu)?;
    save_checkpoint(&pack_autoencoders(&ae)?, &dir.path(VAE_CHECKPOINT))?;
    dir.write("loss_vae_source.csv", &cx.to_csv())?;
    dir.write("loss_vae_target.csv", &cy.to_csv())?;
    println!("wrote {}", dir.path(VAE_CHECKPOINT).display());
    Ok(())
}

fn train_ldm_cmd(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, command)?;
    let arch = cfg.architecture(ds.manifest.grid)?;
    let ae = unpack_autoencoders(&load_stage(&dir.require(VAE_CHECKPOINT, "train-vae")?, Stage::Vae, &Device::Cpu)?, &Device::Cpu)?;
    let (unet, curve) = train_denoiser(&ae, &ds, &arch.unet, &cfg.train_config(Stage::Ldm))?;
    save_checkpoint(&pack_denoiser(&unet)?, &dir.path(LDM_CHECKPOINT))?;
    dir.write("loss_ldm.csv", &curve.to_csv())?;
    println!("wrote {}", dir.path(LDM_CHECKPOINT).display());
    Ok(())
}

fn train_controlnet_cmd(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, command)?;
    let dev = Device::Cpu;
    let vae = dir.require(VAE_CHECKPOINT, "train-vae")?;
    let ldm = dir.require(LDM_CHECKPOINT, "train-ldm")?;
    let ae = unpack_autoencoders(&load_stage(&vae, Stage::Vae, &dev)?, &dev)?;
    let unet = unpack_denoiser(&load_stage(&ldm, Stage::Ldm, &dev)?, &dev)?;
    let (cn, tuned, curve) = train_translator(&ae, &unet, &ds, &cfg.train_config(Stage::Controlnet))?;
    save_checkpoint(&pack_translator(&cn, &tuned)?, &dir.path(CONTROLNET_CHECKPOINT))?;
    dir.write("loss_controlnet.csv", &curve.to_csv())?;
    println!("wrote {}", dir.path(CONTROLNET_CHECKPOINT).display());
    Ok(())
}

fn load_bundle(cfg: &RunConfig, dir: &RunDir) -> Result<ModelBundle, CliError> {
    let dev = Device::Cpu;
    let vae = dir.require(VAE_CHECKPOINT, "train-vae")?;
    let ldm = dir.require(LDM_CHECKPOINT, "train-ldm")?;
    let cn = dir.require(CONTROLNET_CHECKPOINT, "train-controlnet")?;
    let ae = unpack_autoencoders(&load_stage(&vae, Stage::Vae, &dev)?, &dev)?;
    let unet = unpack_denoiser(&load_stage(&ldm, Stage::Ldm, &dev)?, &dev)?;
    let (cn, tuned) = unpack_translator(&load_stage(&cn, Stage::Controlnet, &dev)?, &unet, &dev)?;
    Ok(ModelBundle::new(ae.source, tuned, cn, cfg.schedule.build()?, cfg.inference.steps)?)
}

fn infer_cmd(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, "infer")?;
    let bundle = load_bundle(cfg, &dir)?;
    let x = load_volume(input).with_context(|| format!("loading {}", input.display()))?;
    if x.shape() != ds.manifest.grid.shape().as_slice() {
        return Err(CliError::Usage(format!(
            "input volume shape {:?} does not match the dataset grid {}",
            x.shape(),
            ds.manifest.grid
        )));
    }
    let (sx, sy) = stats(&ds)?;
    let y = bundle.las_estimate(&sx.apply(&x), cfg.inference.m, cfg.inference.seed)?;
    save_volume(&sy.invert(&y), out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} (m = {}, seed = {})", out.display(), cfg.inference.m, cfg.inference.seed);
    Ok(())
}

fn stats(
    ds: &Dataset,
) -> Result<(latent_translate::synthdata::NormStats, latent_translate::synthdata::NormStats), CliError> {
    match (ds.manifest.source_stats, ds.manifest.target_stats) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(CliError::Usage("dataset manifest lacks normalization statistics".into())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredThreshold {
    threshold: f64,
    m: usize,
    seed: u64,
}

fn evaluate_cmd(cfg: &RunConfig, split: SplitArg) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, "evaluate")?;
    let bundle = load_bundle(cfg, &dir)?;
    let (which, name) = match split {
        SplitArg::Val => (Split::Val, "val"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let threshold = match split {
        SplitArg::Test => {
            let p = dir.require(THRESHOLD_FILE, "evaluate --split val")?;
            let text = std::fs::read_to_string(&p)?;
            let t: StoredThreshold =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            t.threshold
        }
        SplitArg::Val => f64::NAN,
    };
    let records = ds.split(which);
    let out = translate_records(&bundle, &records, &cfg.inference, false)?;
    let las: Vec<Volume> = out.iter().map(|t| t.las.clone()).collect();
    let single: Vec<Volume> = out.iter().map(|t| t.single.clone()).collect();
    let threshold = if split == SplitArg::Val {
        let th = select_validation_threshold(&ds.manifest, &las, &records)?;
        let stored = StoredThreshold {
            threshold: th,
            m: cfg.inference.m,
            seed: cfg.inference.seed,
        };
        dir.write(THRESHOLD_FILE, &serde_json::to_string_pretty(&stored).context("threshold")?)?;
        th
    } else {
        threshold
    };
    let rep = evaluate_predictions(&ds.manifest, &las, &records, threshold, &cfg.metrics)?;
    let rep1 = evaluate_predictions(&ds.manifest, &single, &records, threshold, &cfg.metrics)?;
    dir.write(&format!("metrics_{name}.csv"), &rep.to_csv())?;
    dir.write(&format!("metrics_{name}.txt"), &rep.to_text())?;
    dir.write(&format!("metrics_{name}_m1.csv"), &rep1.to_csv())?;
    print!("{name} split, m = {}\n{}", cfg.inference.m, rep.to_text());
    Ok(())
}

fn diagnose_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (dir, ds) = start(cfg, "diagnose")?;
    let bundle = load_bundle(cfg, &dir)?;
    let d = &cfg.diagnose;
    let test = ds.split(Split::Test);
    let subject = test.get(d.bias_subject).ok_or_else(|| {
        CliError::Usage(format!(
            "config key `diagnose.bias_subject`: {} is outside the {}-subject test split",
            d.bias_subject,
            test.len()
        ))
    })?;
    let bias_cfg = BiasConfig {
        m_values: d.m_values.clone(),
        n_mc: d.n_mc,
        n_ref: d.n_ref,
        h: d.fd_step,
        seed: d.seed,
    };
    let z_x = bundle.encode_source(&subject.x)?;
    let bias = empirical_bias_curve(&bundle, &bundle, &z_x, &bias_cfg)?;
    let conds = test
        .iter()
        .map(|r| bundle.encode_source(&r.x))
        .collect::<latent_translate::Result<Vec<_>>>()?;
    let lin = run_linearity_suite(&bundle, &bundle, &conds, d.pairs_per_subject, d.interp_steps, d.seed)?;
    dir.write("bias.csv", &bias.to_csv())?;
    dir.write("linearity.csv", &lin.to_csv())?;
    let mut text = format!(
        "bias curve on test subject {} ({} repetitions, reference over {} draws)\n",
        subject.id, bias.n_mc, bias.n_ref
    );
    for p in &bias.points {
        text.push_str(&format!(
            "m = {:>3}: |bias| = {:.5} ± {:.5} (relative {:.4}), predicted {:.5}\n",
            p.m,
            p.bias_norm,
            p.bias_norm_se,
            bias.relative_bias(p),
            p.predicted_norm
        ));
    }
    text.push_str(&format!(
        "linearity over {} pairs ({} degenerate skipped): PCC {:.4} ± {:.4}, path MSE {:.6} ± {:.6}\n",
        lin.pcc.len(),
        lin.skipped,
        lin.pcc_mean,
        lin.pcc_std,
        lin.mse_mean,
        lin.mse_std
    ));
    dir.write("diagnose.txt", &text)?;
    print!("{text}");
    Ok(())
}

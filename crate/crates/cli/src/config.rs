//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use latent_translate::checkpoint::Stage;
use latent_translate::pipeline::{desk_train_config, Architecture, InferenceConfig, MetricConfig};
use latent_translate::schedule::ScheduleConfig;
use latent_translate::synthdata::Grid;
use latent_translate::training::{TrainConfig, WislMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
}

/// One stage's optimisation settings; the stage itself is implied by the
/// section name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub kl_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub wisl: WislMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub vae: StageSettings,
    pub ldm: StageSettings,
    pub controlnet: StageSettings,
}

impl Stages {
    /// The desk-scale recipe used by the default configuration.
    pub fn desk(seed: u64) -> Self {
        let s = |stage| {
            let c = desk_train_config(stage, seed);
            StageSettings {
                epochs: c.epochs,
                batch_size: c.batch_size,
                learning_rate: c.learning_rate,
                kl_weight: c.kl_weight,
                seed,
                wisl: c.wisl,
            }
        };
        Self {
            vae: s(Stage::Vae),
            ldm: s(Stage::Ldm),
            controlnet: s(Stage::Controlnet),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub m_values: Vec<usize>,
    pub n_mc: usize,
    pub n_ref: usize,
    pub fd_step: f64,
    /// Test-split position of the subject used for the bias curve.
    pub bias_subject: usize,
    pub pairs_per_subject: usize,
    pub interp_steps: usize,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            m_values: vec![1, 2, 4, 8, 16],
            n_mc: 30,
            n_ref: 256,
            fd_step: 1e-2,
            bias_subject: 0,
            pairs_per_subject: 5,
            interp_steps: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Network shapes; the grid default when absent.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    pub stages: Stages,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("config key `{key}`: {msg}"))
}

impl RunConfig {
    pub fn desk(dataset: PathBuf, run_dir: PathBuf, seed: u64) -> Self {
        Self {
            paths: Paths { dataset, run_dir },
            architecture: None,
            stages: Stages::desk(seed),
            schedule: ScheduleConfig::default(),
            inference: InferenceConfig {
                seed,
                ..InferenceConfig::default()
            },
            metrics: MetricConfig {
                seed,
                ..MetricConfig::default()
            },
            diagnose: DiagnoseConfig {
                seed,
                ..DiagnoseConfig::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, s) in [
            ("vae", &self.stages.vae),
            ("ldm", &self.stages.ldm),
            ("controlnet", &self.stages.controlnet),
        ] {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(config_err(&format!("stages.{name}.learning_rate"), "must be positive"));
            }
            if s.epochs == 0 {
                return Err(config_err(&format!("stages.{name}.epochs"), "must be at least 1"));
            }
            if s.batch_size == 0 {
                return Err(config_err(&format!("stages.{name}.batch_size"), "must be at least 1"));
            }
            if s.kl_weight < 0.0 {
                return Err(config_err(&format!("stages.{name}.kl_weight"), "must be non-negative"));
            }
        }
        if self.schedule.build().is_err() {
            return Err(config_err("schedule", "betas must lie in (0, 1) with train_steps >= 1"));
        }
        if self.inference.m < 1 {
            return Err(config_err("inference.m", "must be at least 1"));
        }
        if self.inference.steps < 1 || self.inference.steps > self.schedule.train_steps {
            return Err(config_err("inference.steps", format!("must be in 1..={}", self.schedule.train_steps)));
        }
        if self.metrics.n_perm < 1 {
            return Err(config_err("metrics.n_perm", "must be at least 1"));
        }
        let d = &self.diagnose;
        if d.m_values.is_empty() || d.m_values[0] < 1 || d.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("diagnose.m_values", "must be strictly increasing and at least 1"));
        }
        if d.n_mc < 2 || d.n_ref < 2 {
            return Err(config_err("diagnose.n_mc", "n_mc and n_ref must be at least 2"));
        }
        if !(d.fd_step > 0.0) {
            return Err(config_err("diagnose.fd_step", "must be positive"));
        }
        if d.pairs_per_subject < 1 {
            return Err(config_err("diagnose.pairs_per_subject", "must be at least 1"));
        }
        if d.interp_steps < 3 {
            return Err(config_err("diagnose.interp_steps", "must be at least 3"));
        }
        Ok(())
    }

    pub fn architecture(&self, grid: Grid) -> Result<Architecture, CliError> {
        let arch = self.architecture.clone().unwrap_or_else(|| Architecture::for_grid(grid));
        arch.validate(grid).map_err(|e| config_err("architecture", e))?;
        Ok(arch)
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = match stage {
            Stage::Vae => &self.stages.vae,
            Stage::Ldm => &self.stages.ldm,
            Stage::Controlnet => &self.stages.controlnet,
        };
        TrainConfig {
            stage,
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            kl_weight: s.kl_weight,
            seed: s.seed,
            schedule: self.schedule.clone(),
            wisl: s.wisl,
        }
    }
}

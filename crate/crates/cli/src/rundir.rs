//! Run directory layout and its advisory lock.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;

use crate::CliError;

pub const LOCK_FILE: &str = ".lock";
pub const VAE_CHECKPOINT: &str = "vae.cclt";
pub const LDM_CHECKPOINT: &str = "ldm.cclt";
pub const CONTROLNET_CHECKPOINT: &str = "controlnet.cclt";
pub const THRESHOLD_FILE: &str = "threshold.json";

/// Exclusive use of a run directory for the lifetime of the value.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the directory if needed and take the lock. A held lock is a
    /// runtime failure; a stale one left by a killed process must be removed
    /// by hand.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Runtime(anyhow::anyhow!(
                    "run directory {} is in use (remove {} if no command is running)",
                    root.display(),
                    lock.display()
                ))
            } else {
                CliError::Runtime(anyhow::Error::new(e).context(format!("creating {}", lock.display())))
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Fail with a usage error unless `name` exists.
    pub fn require(&self, name: &str, stage_command: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(CliError::Usage(format!(
                "missing {}: run {stage_command} first",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK_FILE));
    }
}

//! Output directory ownership and the files every run leaves behind.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

pub const LOCK_FILE: &str = ".lock";
pub const VERSION_FILE: &str = "VERSION";
pub const CONFIG_FILE: &str = "effective_config.json";
pub const LOG_FILE: &str = "run.log";

/// Holds the directory's lockfile until dropped.
pub struct Run {
    dir: PathBuf,
    log: fs::File,
}

impl Run {
    /// Creates `dir` if needed and takes its lock. A directory locked by
    /// another run is refused.
    pub fn open(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(aspdnet::Error::Config(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let log_path = dir.join(LOG_FILE);
        let log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        let run = Self { dir: dir.to_path_buf(), log };
        run.write(
            VERSION_FILE,
            format!(
                "aspdnet {}\ncheckpoint format {}\ncommand {command}\n",
                env!("CARGO_PKG_VERSION"),
                aspdnet::checkpoint::FORMAT_VERSION
            ),
        )?;
        run.write(CONFIG_FILE, serde_json::to_string_pretty(cfg)? + "\n")?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Appends to `run.log` and echoes to stderr.
    pub fn log(&mut self, line: impl AsRef<str>) {
        eprintln!("{}", line.as_ref());
        self.record(line);
    }

    /// Appends to `run.log` only.
    pub fn record(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.log, "{}", line.as_ref());
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

//! Output directory handling. Every JSON artifact wraps its payload with the
//! provenance needed to reproduce it; nothing time-dependent is recorded, so
//! identical inputs give byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub mdm_core: &'static str,
    pub mdm_cli: &'static str,
}

impl Provenance {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        Provenance {
            subcommand: subcommand.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            versions: Versions {
                mdm_core: mdm_core::VERSION,
                mdm_cli: env!("CARGO_PKG_VERSION"),
            },
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    provenance: &'a Provenance,
    result: &'a T,
}

/// Tracks files written by one subcommand so a failed run leaves nothing behind.
pub struct ArtifactSink {
    dir: PathBuf,
    provenance: Provenance,
    written: Vec<PathBuf>,
    created_dir: bool,
    committed: bool,
}

impl ArtifactSink {
    pub fn open(dir: &Path, provenance: Provenance) -> Result<Self, CliError> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(ArtifactSink {
            dir: dir.to_path_buf(),
            provenance,
            written: Vec::new(),
            created_dir,
            committed: false,
        })
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Reserves `name` in the output directory and returns its path.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.written.contains(&p) {
            self.written.push(p.clone());
        }
        p
    }

    pub fn json<T: Serialize>(&mut self, name: &str, result: &T) -> Result<PathBuf, CliError> {
        let env = Envelope {
            provenance: &self.provenance,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    /// Writes a CSV table through `fill`.
    pub fn csv<F>(&mut self, name: &str, fill: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(fs::File) -> mdm_core::Result<()>,
    {
        let p = self.path(name);
        fill(fs::File::create(&p)?)?;
        Ok(p)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for ArtifactSink {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

//! Output directory: JSON reports, CSV series and a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// One written file and what it holds.
#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub contents: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub mode: String,
    pub config_sha256: String,
    pub config_path: String,
    /// The configuration after applying defaults and command-line overrides.
    pub effective_config: RunConfig,
    pub threads: Option<usize>,
    pub versions: Versions,
    pub timings_seconds: Vec<(String, f64)>,
    pub files: Vec<FileEntry>,
    /// Acceptance checks of the pipeline, `(name, passed)`.
    pub checks: Vec<(String, bool)>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub kgkam: &'static str,
    pub kam_core: &'static str,
}

pub struct Artifact {
    dir: PathBuf,
    files: Vec<FileEntry>,
    timings: Vec<(String, f64)>,
    checks: Vec<(String, bool)>,
}

impl Artifact {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            timings: Vec::new(),
            checks: Vec::new(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, contents: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, contents, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, contents: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().context("flushing CSV buffer")?;
        self.write(name, contents, &bytes)
    }

    /// CSV with a header built at run time.
    pub fn table(&mut self, name: &str, contents: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().context("flushing CSV buffer")?;
        self.write(name, contents, &bytes)
    }

    fn write(&mut self, name: &str, contents: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileEntry {
            path: name.to_string(),
            contents: contents.to_string(),
        });
        Ok(())
    }

    pub fn time(&mut self, label: &str, d: Duration) {
        self.timings.push((label.to_string(), d.as_secs_f64()));
    }

    pub fn check(&mut self, name: &str, passed: bool) {
        self.checks.push((name.to_string(), passed));
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    /// Writes `manifest.json`, the one file that is not reproducible byte for byte (timings).
    pub fn finish(self, mode: &str, config_path: &Path, config_bytes: &[u8], config: &RunConfig, threads: Option<usize>) -> Result<bool> {
        let passed = self.all_passed();
        let manifest = Manifest {
            mode: mode.to_string(),
            config_sha256: format!("{:x}", Sha256::digest(config_bytes)),
            config_path: config_path.display().to_string(),
            effective_config: config.clone(),
            threads,
            versions: Versions {
                kgkam: env!("CARGO_PKG_VERSION"),
                kam_core: kam_core::VERSION,
            },
            timings_seconds: self.timings,
            files: self.files,
            checks: self.checks,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(passed)
    }
}

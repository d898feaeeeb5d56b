//! Per-command run manifests: what was read, what was written, with hashes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: seed::sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    /// Effective configuration, in the key-value text format.
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

/// Collects a manifest while a command runs; [`ManifestBuilder::finish`]
/// hashes every output and writes the manifest last.
#[derive(Debug)]
pub struct ManifestBuilder {
    subcommand: String,
    config: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            config: String::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, text: impl Into<String>) -> &mut Self {
        self.config = text.into();
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    pub fn build(&self) -> Result<RunManifest> {
        let digest = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<Vec<_>>>()
        };
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.clone(),
            config: self.config.clone(),
            seed: self.seed,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            duration_secs: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Writes the manifest atomically to `path` and returns it.
    pub fn finish(&self, path: &Path) -> Result<RunManifest> {
        let m = self.build()?;
        let mut text =
            serde_json::to_string_pretty(&m).map_err(|e| Error::Invalid(e.to_string()))?;
        text.push('\n');
        io::write_atomic(path, text.as_bytes())?;
        Ok(m)
    }
}

/// `<file>.manifest.json` next to a file, or `manifest.json` inside a directory.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("manifest.json")
    } else {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = io::read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

//! Run manifests: what a command read, what it wrote, and with which settings.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub svkit_version: String,
    pub args: Vec<String>,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Collects inputs and outputs while a command runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn write(self, command: &str, cfg: &PipelineConfig, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            svkit_version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
            config: cfg.clone(),
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// `<output>.manifest.json`, or `<dir>/manifest.json` for directory outputs.
pub fn default_manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("manifest.json")
    } else {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

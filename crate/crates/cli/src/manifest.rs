//! Run manifests: resolved configuration, seed, and artifact digests.

use std::fs;
use std::path::{Path, PathBuf};

use contam_moe::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// File name, relative to the manifest's directory.
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Base seed of the run, when the command is stochastic.
    pub seed: Option<u64>,
    /// Configuration after defaults and overrides; feeding it back reproduces the run.
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    /// Set when the run stopped early; artifacts written before the failure are still listed.
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed,
            config,
            artifacts: Vec::new(),
            error: None,
        }
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        self.artifacts.push(Artifact {
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(&self, prefix: &Path) -> Result<PathBuf> {
        let path = manifest_path(prefix);
        let body = serde_json::to_vec_pretty(self)?;
        fs::write(&path, body).map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "_manifest.json")
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

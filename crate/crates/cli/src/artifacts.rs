//! Stage outputs on disk, each wrapped with the provenance needed to
//! re-derive it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input files (relative to the run directory when inside it) and
    /// their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub tool: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    pub data: T,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// One configured run: its config, hash and output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub config_hash: String,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig) -> Self {
        let out = config.resolved_out_dir();
        Self { config_hash: config.hash(), config, out }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn input_key(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().into_owned()
    }

    pub fn provenance(&self, stage: &str, inputs: &[PathBuf]) -> CliResult<Provenance> {
        let inputs = inputs.iter().map(|p| Ok((self.input_key(p), sha256_file(p)?))).collect::<CliResult<_>>()?;
        Ok(Provenance {
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            inputs,
            tool: concat!("mvscan ", env!("CARGO_PKG_VERSION")).to_string(),
        })
    }

    /// Writes `data` under the run directory and returns its path.
    pub fn write<T: Serialize>(&self, stage: &str, rel: impl AsRef<Path>, data: T, inputs: &[PathBuf]) -> CliResult<PathBuf> {
        let path = self.path(rel);
        write_json(&path, &Artifact { provenance: self.provenance(stage, inputs)?, data })?;
        Ok(path)
    }

    /// Reads an artifact that `stage` produces, or a dependency error naming
    /// that stage.
    pub fn read<T: DeserializeOwned>(&self, stage: &'static str, rel: impl AsRef<Path>) -> CliResult<(T, PathBuf)> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::Dependency { stage, path });
        }
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let a: Artifact<T> = serde_json::from_slice(&bytes)?;
        Ok((a.data, path))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL_VERSION: &str = concat!("fooling ", env!("CARGO_PKG_VERSION"));

/// Provenance written next to every output. Contains no timestamps, so
/// repeating a run reproduces it byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Every flag after defaults and config were resolved.
    pub flags: Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input checkpoint, keyed by flag.
    pub checkpoints: BTreeMap<String, String>,
    /// Dataset fingerprints (FNV-1a of shape, pixels and labels), keyed by flag.
    pub datasets: BTreeMap<String, String>,
    /// SHA-256 of each file written, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    /// Extra facts about the run, such as the number of excluded samples.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(command: &str, flags: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            flags: serde_json::to_value(flags)?,
            seeds: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            datasets: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn checkpoint(&mut self, flag: &str, path: &Path) -> Result<(), CliError> {
        self.checkpoints.insert(flag.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn dataset(&mut self, flag: &str, fingerprint: u64) {
        self.datasets.insert(flag.into(), format!("{fingerprint:016x}"));
    }

    /// Records an output file by name and hash.
    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(&bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// `out.ckpt` → `out.ckpt.manifest.json`.
pub fn manifest_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

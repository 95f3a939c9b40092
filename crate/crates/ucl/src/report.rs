//! Run artifacts: byte-stable metrics.json, a manifest of everything
//! written, and atomic file writes so interrupted runs never leave
//! half-reports behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UclError};

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| UclError::contract(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 over the command name plus the canonical (compact) JSON encoding
/// of the resolved configuration. The output directory is deliberately not
/// part of any hashed config, so re-running into a different directory
/// reproduces identical metrics bytes.
pub fn config_hash<T: Serialize>(command: &str, config: &T) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_string(config)?.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// The metrics.json layout: flat metric table plus provenance fields.
/// Field order is fixed by the struct; metric keys sort via the BTreeMap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Serialize metrics, refusing non-finite values. The refusal is a
/// numerical abort (exit code 2): a NaN metric means the run itself went
/// numerically wrong, not that the caller misused the API.
pub fn metrics_json(metrics: &BTreeMap<String, f64>, seed: u64, config_hash: &str) -> Result<String> {
    for (name, &value) in metrics {
        if !value.is_finite() {
            return Err(UclError::Numeric {
                step: 0,
                msg: format!("refusing to write non-finite metric '{name}' = {value}"),
            });
        }
    }
    let file = MetricsFile {
        config_hash: config_hash.to_string(),
        metrics: metrics.clone(),
        seed,
    };
    let mut body = serde_json::to_string_pretty(&file)?;
    body.push('\n');
    Ok(body)
}

pub fn write_metrics(
    dir: &Path,
    metrics: &BTreeMap<String, f64>,
    seed: u64,
    config_hash: &str,
) -> Result<PathBuf> {
    let body = metrics_json(metrics, seed, config_hash)?;
    let path = dir.join("metrics.json");
    atomic_write(&path, body.as_bytes())?;
    Ok(path)
}

/// What a command run produced: every artifact path (relative to the output
/// directory) except the manifest itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub out_dir: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(
        command: &str,
        seed: u64,
        out_dir: &Path,
        config: &T,
        config_hash: &str,
    ) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            seed,
            out_dir: out_dir.display().to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash.to_string(),
            files: Vec::new(),
        })
    }

    /// Record a written file, stored relative to the output directory.
    pub fn record(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.files.push(rel.display().to_string());
    }

    pub fn write(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let mut body = serde_json::to_string_pretty(&self)?;
        body.push('\n');
        let path = out_dir.join("manifest.json");
        atomic_write(&path, body.as_bytes())?;
        Ok(path)
    }
}

//! Run manifests: every command writes one next to its outputs, recording
//! the effective config, seed, input digests, and tool version. Two runs
//! with identical manifests (timestamps aside) produce byte-identical
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path -> SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    /// The only field allowed to differ between reruns.
    pub created_unix: u64,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &RunConfig,
    input_paths: &[&Path],
) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for path in input_paths {
        inputs.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = Manifest {
        tool: "adembed",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        seed: config.seed,
        config: config.clone(),
        inputs,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        std::fs::write(&path, "hello").unwrap();
        let a = sha256_file(&path).unwrap();
        let b = sha256_file(&path).unwrap();
        assert_eq!(a, b);
        std::fs::write(&path, "hello!").unwrap();
        assert_ne!(a, sha256_file(&path).unwrap());
    }
}

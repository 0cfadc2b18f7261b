//! The run manifest: what was produced, from which configuration, and the
//! content hash of every artifact.
//!
//! Each command records the files it writes and verifies the files it
//! consumes. A consumer finding a missing artifact, a hash mismatch, or a
//! manifest written under a different configuration fails with a dependency
//! error instead of silently mixing stale artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One recorded artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    /// Hex SHA-256 of the file contents at record time.
    pub sha256: String,
    /// Wall-clock write time (milliseconds since the epoch); informational
    /// only, never part of reproducibility comparisons.
    pub written_unix_ms: u128,
}

/// The manifest of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the effective configuration (after CLI overrides).
    pub config_hash: String,
    /// Artifacts by logical name (e.g. "grammar", "lm", "meta_state").
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            config_hash: config_hash.to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    fn file(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// Loads the manifest in `dir`, or starts a fresh one when none exists.
    /// An existing manifest with a different config hash is a dependency
    /// error: the directory holds artifacts of some other experiment.
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Result<Self> {
        let path = Self::file(dir);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if manifest.config_hash != config_hash {
            return Err(CliError::Dependency(format!(
                "run directory {} was produced under config hash {}, current config hashes to \
                 {config_hash}; regenerate with gen-world or choose another --out",
                dir.display(),
                manifest.config_hash
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(Self::file(dir), json)?;
        Ok(())
    }

    /// Hashes a freshly written file and records it under `name`.
    pub fn record(&mut self, dir: &Path, name: &str, relative: &str) -> Result<()> {
        let full = dir.join(relative);
        let digest = hash_file(&full)?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path: relative.to_string(),
                sha256: digest,
                written_unix_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
            },
        );
        Ok(())
    }

    /// Resolves a recorded artifact, verifying existence and content hash.
    pub fn require(&self, dir: &Path, name: &str, producer: &str) -> Result<PathBuf> {
        let record = self.artifacts.get(name).ok_or_else(|| {
            CliError::Dependency(format!(
                "artifact '{name}' has not been produced yet; run `{producer}` first"
            ))
        })?;
        let full = dir.join(&record.path);
        if !full.exists() {
            return Err(CliError::Dependency(format!(
                "artifact '{name}' ({}) is recorded but missing on disk; rerun `{producer}`",
                full.display()
            )));
        }
        let digest = hash_file(&full)?;
        if digest != record.sha256 {
            return Err(CliError::Dependency(format!(
                "artifact '{name}' ({}) does not match its recorded hash — stale or edited; \
                 rerun `{producer}`",
                full.display()
            )));
        }
        Ok(full)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path)?))
}

/// Hex SHA-256 of a byte string.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_then_require_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.json"), b"{}").unwrap();
        let mut m = RunManifest::new("h");
        m.record(dir.path(), "a", "a.json").unwrap();
        let path = m.require(dir.path(), "a", "gen-world").unwrap();
        assert_eq!(path, dir.path().join("a.json"));
    }

    #[test]
    fn missing_artifact_names_its_producer() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("h");
        let err = m.require(dir.path(), "lm", "pretrain-lm").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("pretrain-lm"));
    }

    #[test]
    fn edited_artifact_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.json"), b"{}").unwrap();
        let mut m = RunManifest::new("h");
        m.record(dir.path(), "a", "a.json").unwrap();
        std::fs::write(dir.path().join("a.json"), b"{ }").unwrap();
        let err = m.require(dir.path(), "a", "gen-world").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("stale"));
    }

    #[test]
    fn foreign_config_hash_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("old");
        m.save(dir.path()).unwrap();
        let err = RunManifest::load_or_new(dir.path(), "new").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(RunManifest::load_or_new(dir.path(), "old").is_ok());
    }

    #[test]
    fn hash_is_stable_and_hex() {
        let h = hash_bytes(b"abc");
        assert_eq!(
            h,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

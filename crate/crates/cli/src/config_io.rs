//! Configuration loading for the command-line tools.
//!
//! A run is driven by one JSON document. This module parses it with
//! field-level error reporting, applies command-line overrides (seed,
//! workers), validates the result, and derives the configuration hash that
//! stamps every artifact and report row.

use std::fs;
use std::path::Path;

use cotcap_core::config::ExperimentConfig;

use crate::error::{CliError, Result};
use crate::manifest::hash_bytes;

/// Loads, overrides, and validates the experiment configuration.
///
/// Any problem — missing file, malformed JSON, an unknown or ill-typed field,
/// or a value rejected by validation — is a configuration error (exit 2). The
/// parse error message names the offending field path.
pub fn load_config(
    path: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut deserializer = serde_json::Deserializer::from_str(&text);
    let mut config: ExperimentConfig = serde_path_to_error::deserialize(&mut deserializer)
        .map_err(|e| {
            CliError::Config(format!(
                "config {}: field `{}`: {}",
                path.display(),
                e.path(),
                e.inner()
            ))
        })?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(workers) = workers {
        config.workers = workers;
    }
    config.validate().map_err(CliError::from)?;
    Ok(config)
}

/// Hash of the effective configuration: hex SHA-256 of its canonical JSON
/// serialization after overrides. Two runs agree on it exactly when every
/// setting (including seed and workers) agrees.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    Ok(hash_bytes(serde_json::to_string(config)?.as_bytes()))
}

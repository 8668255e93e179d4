//! Layered run configuration. A TOML file supplies `[corpus]`, `[model]`
//! and `[train]` sections (each optional, each falling back to defaults
//! field by field); `SPANSET_SEED` overrides file seeds; explicit flags
//! override everything.

use std::path::Path;

use serde::Deserialize;
use spanset_core::corpus::CorpusSpec;
use spanset_core::model::ModelConfig;
use spanset_core::train::TrainConfig;
use spanset_core::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub corpus: Option<CorpusSpec>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Seed override from `SPANSET_SEED`, when set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SPANSET_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("SPANSET_SEED {v:?}: {e}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("SPANSET_SEED: {e}"))),
    }
}

//! Run manifests: a record of what a command ran with and what it produced.
//!
//! The `identity` field hashes the reproducible part (command, seed, config
//! snapshot, input content hashes); two runs with equal identities produce
//! byte-identical artifacts. Timings sit outside the identity.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spanset_core::corpus::CorpusSpec;
use spanset_core::model::ModelConfig;
use spanset_core::train::TrainConfig;
use spanset_core::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Input path -> sha256 of its content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// sha256 over (command, seed, configs, inputs).
    pub identity: String,
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
}

pub struct Builder {
    command: String,
    seed: u64,
    corpus: Option<CorpusSpec>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    inputs: BTreeMap<String, String>,
    started: Instant,
    started_unix_ms: u64,
}

impl Builder {
    pub fn new(command: &str, seed: u64) -> Self {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            seed,
            corpus: None,
            model: None,
            train: None,
            inputs: BTreeMap::new(),
            started: Instant::now(),
            started_unix_ms,
        }
    }

    pub fn corpus(mut self, spec: CorpusSpec) -> Self {
        self.corpus = Some(spec);
        self
    }

    pub fn model(mut self, cfg: ModelConfig) -> Self {
        self.model = Some(cfg);
        self
    }

    pub fn train(mut self, cfg: TrainConfig) -> Self {
        self.train = Some(cfg);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(path)?);
        Ok(self)
    }

    pub fn finish(self, outputs: &[&Path]) -> RunManifest {
        let identity_src = serde_json::json!({
            "command": self.command,
            "seed": self.seed,
            "corpus": self.corpus,
            "model": self.model,
            "train": self.train,
            "inputs": self.inputs,
        });
        let mut h = Sha256::new();
        h.update(identity_src.to_string().as_bytes());
        RunManifest {
            command: self.command,
            seed: self.seed,
            corpus: self.corpus,
            model: self.model,
            train: self.train,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            identity: format!("{:x}", h.finalize()),
            started_unix_ms: self.started_unix_ms,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        }
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Manifest location for a single-file artifact: `<artifact>.manifest.json`.
pub fn sidecar(artifact: &Path) -> PathBuf {
    let mut os = artifact.as_os_str().to_owned();
    os.push(".manifest.json");
    os.into()
}

pub fn write(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m)
        .map_err(|e| Error::Config(format!("encoding manifest: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

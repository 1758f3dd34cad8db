//! Run configuration: one JSON document, overridable key by key.

use std::path::{Path, PathBuf};

use asmr_core::data::SynthConfig;
use asmr_core::{Error, LossConfig, ModelShape, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ASMR_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "asmr-out";

/// File locations. Not part of the config hash, so that the same run
/// written to two directories produces identical reports.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory (`schema.json`, `samples.jsonl`, `splits.json`).
    /// Defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    /// Explicit schema file; overrides the one in `data`.
    pub schema: Option<PathBuf>,
    /// Explicit samples file; overrides the one in `data`.
    pub samples: Option<PathBuf>,
    /// Explicit split manifest; overrides the one in `data`.
    pub splits: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Report and checkpoint output directory.
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub instances: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Rank cut-offs reported by `eval` and `ablate`.
    pub ks: Vec<usize>,
    /// Seeds the data generator and the trainer.
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    /// Evaluation split reported by `ablate`: `seen`, `unseen` or `all`.
    pub ablate_split: String,
    /// Write a checkpoint every this many epochs during `train` (0: final only).
    pub checkpoint_every: usize,
    pub drop_singletons: bool,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 1;
        Self {
            paths: Paths::default(),
            synth: SynthConfig::standard(seed),
            model: ModelShape {
                feature_dim: SynthConfig::standard(seed).feature_dim,
                ..ModelShape::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            ks: vec![1, 5, 10],
            seed,
            seeds: vec![1, 2, 3, 4, 5],
            ablate_split: "unseen".into(),
            checkpoint_every: 0,
            drop_singletons: false,
            gradcheck: GradcheckSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the top-level seed into the generator and trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Applies `key=value` where `key` is a dotted path into the JSON form
    /// and `value` is JSON, falling back to a bare string.
    pub fn apply_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        }
        *slot = value;
        serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override '{assignment}': {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ks must be positive and strictly ascending, got {:?}",
                self.ks
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !["seen", "unseen", "all"].contains(&self.ablate_split.as_str()) {
            return Err(Error::Config(format!(
                "ablate_split must be seen, unseen or all, got '{}'",
                self.ablate_split
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// with `paths` left out.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = doc.as_object_mut() {
            map.remove("paths");
        }
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

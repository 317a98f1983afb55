use std::path::{Path, PathBuf};

use basetx_core::encoder::EncoderConfig;
use basetx_core::episodes::SynthConfig;
use basetx_core::evalrig::EvalConfig;
use basetx_core::trainer::{MetaConfig, PretrainConfig};
use basetx_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub per_class_cap: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { per_class_cap: 200 }
    }
}

/// Input locations. Unset entries resolve to the stable artifact names
/// under `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub phi0: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Similarity matrix JSON; defaults to `<data>/similarity.json`.
    pub semantic: Option<PathBuf>,
    /// Oracle prototypes JSON.
    pub oracle: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Copied into every stage seed by `--seed`.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub bank: BankConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            bank: BankConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.meta.seed = seed;
        self.eval.seed = seed;
    }

    /// Applies one `key.path=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        let mut updated: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("--set {key}: {e}")))?;
        if key == "seed" {
            updated.set_seed(updated.seed);
        }
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }
}

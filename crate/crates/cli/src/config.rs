//! Run configuration: a preset plus optional JSON overrides.

use std::path::Path;

use clap::ValueEnum;
use dcam_core::config::{GuidanceMode, ModelConfig};
use dcam_core::training::schedule::TrainConfig;
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Width 1.0, the reference network.
    Full,
    /// Width 0.25, for desk-scale runs.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    None,
    Click,
    Trimap,
}

impl From<Mode> for GuidanceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => GuidanceMode::None,
            Mode::Click => GuidanceMode::Click,
            Mode::Trimap => GuidanceMode::Trimap,
        }
    }
}

/// Contents of a `--config` file. Every field is optional.
///
/// ```json
/// {"preset": "tiny", "mode": "click", "model": {"nca": 1}, "train": {"epochs": 10}}
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub mode: Option<GuidanceMode>,
    /// Field overrides applied on top of the preset.
    pub model: Option<Value>,
    pub train: Option<TrainConfig>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Command line flags take precedence over the file.
    pub fn model_config(&self, preset: Option<Preset>, mode: Option<Mode>) -> Result<ModelConfig, CliError> {
        let mode = mode.map(GuidanceMode::from).or(self.mode).unwrap_or(GuidanceMode::Click);
        let base = match preset.or(self.preset).unwrap_or(Preset::Tiny) {
            Preset::Full => ModelConfig::full(mode),
            Preset::Tiny => ModelConfig::tiny(mode),
        };
        let Some(Value::Object(overrides)) = &self.model else {
            return match &self.model {
                None => Ok(base),
                Some(_) => Err(CliError::Usage("config field \"model\" must be an object".into())),
            };
        };
        let mut merged = serde_json::to_value(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
        let fields = merged.as_object_mut().expect("model config serialises to an object");
        for (k, v) in overrides {
            if !fields.contains_key(k) {
                return Err(CliError::Usage(format!("unknown model field {k:?}")));
            }
            fields.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: Option<u64>) -> TrainConfig {
        let mut cfg = self.train.clone().unwrap_or_default();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg
    }
}

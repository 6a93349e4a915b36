use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_NEGATIVE_RESPONSE;
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig};

/// Objective applied to forget-split batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForgetLoss {
    /// `α / (L_ntp + ε)`.
    #[serde(rename = "EUL")]
    Eul,
    /// `(α / (L_ntp + ε))²`.
    #[serde(rename = "EUL_SQUARED")]
    EulSquared,
    /// `−L_ntp`.
    #[serde(rename = "GRAD_ASCENT")]
    GradAscent,
    /// Plain next-token loss (fine-tuning on the forget outputs).
    #[serde(rename = "NTP")]
    Ntp,
}

impl ForgetLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ForgetLoss::Eul => "EUL",
            ForgetLoss::EulSquared => "EUL_SQUARED",
            ForgetLoss::GradAscent => "GRAD_ASCENT",
            ForgetLoss::Ntp => "NTP",
        }
    }
}

impl fmt::Display for ForgetLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForgetLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EUL" => Ok(ForgetLoss::Eul),
            "EUL_SQUARED" | "EUL2" => Ok(ForgetLoss::EulSquared),
            "GRAD_ASCENT" | "GA" => Ok(ForgetLoss::GradAscent),
            "NTP" => Ok(ForgetLoss::Ntp),
            _ => Err(Error::Config(format!(
                "unknown forget loss {s:?}; expected EUL, EUL_SQUARED, GRAD_ASCENT or NTP"
            ))),
        }
    }
}

/// Everything a training or unlearning run needs. Serialized as the JSON
/// config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub forget_loss: ForgetLoss,
    pub alpha: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_retain: bool,
    pub use_augmentation: bool,
    pub use_negative_response: bool,
    pub negative_phrase: String,
    /// Architecture for freshly trained base models.
    pub model: ModelConfig,
    /// Adapters to train instead of the full weights; `None` trains everything.
    pub lora: Option<LoraConfig>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            forget_loss: ForgetLoss::Eul,
            alpha: 1.0,
            epsilon: 1e-3,
            lr: 1e-4,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            use_retain: true,
            use_augmentation: false,
            use_negative_response: false,
            negative_phrase: DEFAULT_NEGATIVE_RESPONSE.to_string(),
            model: ModelConfig::default(),
            lora: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("alpha", self.alpha)?;
        positive("epsilon", self.epsilon)?;
        positive("lr", self.lr)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.use_negative_response && self.negative_phrase.is_empty() {
            return Err(Error::Config("negative_phrase must be nonempty".into()));
        }
        self.model.validate()?;
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: UnlearnConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override. Nested fields use dotted keys
    /// (`model.d_model`, `lora.rank`); `lora=null` disables adapters, and setting
    /// any `lora.*` key on a config without adapters starts from the defaults.
    /// Values are read as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key {key:?}"));
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            let obj = node.as_object_mut().ok_or_else(unknown)?;
            let slot = obj.get_mut(part).ok_or_else(unknown)?;
            if parts.peek().is_none() {
                let raw = serde_json::Value::String(value.to_string());
                *slot = if slot.is_string() {
                    raw
                } else {
                    serde_json::from_str(value).unwrap_or(raw)
                };
                break;
            }
            if slot.is_null() && part == "lora" {
                *slot = serde_json::to_value(LoraConfig::default())?;
            }
            node = slot;
        }
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))?;
        Ok(())
    }
}

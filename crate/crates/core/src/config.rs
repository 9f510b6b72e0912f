//! Flat JSON training configuration and named presets.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossToggles, LossWeights};
use crate::plg::{LabelPolarity, PlgConfig};
use crate::prompt::NvpMode;
use crate::tcsal::{TcsalConfig, TemporalMode};

pub const PRESETS: &[&str] = &["ucf-like", "xd-like", "synthetic"];

/// Every training knob as one flat document. Files may name a `preset`
/// and override any subset of keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_normal: usize,
    pub batch_abnormal: usize,
    pub seed: u64,
    /// Number of learnable context vectors in each prompt.
    pub context_len: usize,
    pub alpha: f64,
    pub theta: f64,
    pub label_polarity: LabelPolarity,
    /// When false the normal-text similarities are ignored in the fusion.
    pub normality_guidance: bool,
    pub nvp: NvpMode,
    pub temporal: TemporalMode,
    pub layers: usize,
    pub heads: usize,
    pub softness: f64,
    pub ffn_ratio: usize,
    pub lambda_sp: f64,
    pub lambda_sm: f64,
    pub rank_normal: bool,
    pub rank_abnormal: bool,
    pub dil: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::ucf_like()
    }
}

impl TrainConfig {
    pub fn ucf_like() -> Self {
        let tcsal = TcsalConfig::default();
        let w = LossWeights::default();
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.005,
            epochs: 50,
            batch_normal: 32,
            batch_abnormal: 32,
            seed: 0,
            context_len: 8,
            alpha: 0.2,
            theta: 0.55,
            label_polarity: LabelPolarity::AnomalyOriented,
            normality_guidance: true,
            nvp: NvpMode::SimilarityAggregate,
            temporal: TemporalMode::Tcsal,
            layers: tcsal.layers,
            heads: tcsal.heads,
            softness: tcsal.softness,
            ffn_ratio: tcsal.ffn_ratio,
            lambda_sp: w.lambda_sp,
            lambda_sm: w.lambda_sm,
            rank_normal: true,
            rank_abnormal: true,
            dil: true,
        }
    }

    pub fn xd_like() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            theta: 0.35,
            ..Self::ucf_like()
        }
    }

    /// `ucf-like` with the mask ramp and threshold tuned for the synthetic
    /// benchmark's 64-frame videos.
    pub fn synthetic() -> Self {
        Self {
            softness: 16.0,
            ..Self::ucf_like()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ucf-like" => Ok(Self::ucf_like()),
            "xd-like" => Ok(Self::xd_like()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a JSON object; an optional `"preset"` key picks the base
    /// values (default `ucf-like`), remaining keys override them.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let Value::Object(mut overrides) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let base = match overrides.remove("preset") {
            None => Self::ucf_like(),
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        base.with_overrides(overrides)
    }

    /// Applies `key: value` overrides with the same validation as a file.
    pub fn with_overrides(&self, overrides: serde_json::Map<String, Value>) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object")
        };
        merged.extend(overrides);
        let cfg: Self = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_normal == 0 || self.batch_abnormal == 0 {
            return Err(Error::Config("batch composition needs normal and abnormal videos".into()));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be >= 1".into()));
        }
        self.plg().validate()?;
        self.loss_weights().validate()?;
        if self.layers == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("layers, heads and ffn_ratio must be positive".into()));
        }
        if !(self.softness >= 1.0 && self.softness.is_finite()) {
            return Err(Error::Config("softness must be >= 1".into()));
        }
        Ok(())
    }

    /// Pseudo-label settings; disabling normality guidance sets α = 0.
    pub fn plg(&self) -> PlgConfig {
        PlgConfig {
            alpha: if self.normality_guidance { self.alpha } else { 0.0 },
            theta: self.theta,
            polarity: self.label_polarity,
        }
    }

    pub fn tcsal(&self) -> TcsalConfig {
        TcsalConfig {
            layers: self.layers,
            heads: self.heads,
            softness: self.softness,
            ffn_ratio: self.ffn_ratio,
            mode: self.temporal,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_sp: self.lambda_sp,
            lambda_sm: self.lambda_sm,
        }
    }

    pub fn loss_toggles(&self) -> LossToggles {
        LossToggles {
            rank_normal: self.rank_normal,
            rank_abnormal: self.rank_abnormal,
            dil: self.dil,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

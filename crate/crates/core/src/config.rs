//! Run configuration: every hyperparameter of a benchmark run with its default,
//! readable from flat `key=value` text or from a JSON manifest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::adapters::{AdapterKind, DEFAULT_ALPHA};
use crate::optim::AdamConfig;
use crate::reparam::{SigmaMode, ThetaInit, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// What the encoder's adapted layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Frozen encoder, no adapter.
    Base,
    OrthoGeo,
    Lora,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Base => "Base",
            Method::OrthoGeo => AdapterKind::OrthoGeo.label(),
            Method::Lora => AdapterKind::Lora.label(),
        }
    }

    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::Base => None,
            Method::OrthoGeo => Some(AdapterKind::OrthoGeo),
            Method::Lora => Some(AdapterKind::Lora),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| ConfigError::BadValue {
            key: "method".into(),
            message: format!("`{s}` is not one of base, orthogeo, lora"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,

    pub depth: usize,
    pub branching: usize,
    /// Child prototype = normalize(parent + gamma·noise).
    pub gamma: f64,
    pub per_concept: usize,
    pub noise: f64,
    pub mix: f64,

    pub d_feat: usize,
    pub d_emb: usize,
    pub temperature: f64,

    pub rank: usize,
    pub alpha: f64,
    pub sigma_mode: SigmaMode,
    pub epsilon: f64,
    /// `None` picks the sigma mode's own default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_init: Option<f64>,
    pub theta_init: ThetaInit,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,

    pub max_steps: usize,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            method: Method::OrthoGeo,
            seed: 1,
            depth: 3,
            branching: 5,
            gamma: 0.5,
            per_concept: 24,
            noise: 0.6,
            mix: 0.3,
            d_feat: 64,
            d_emb: 64,
            temperature: 0.05,
            rank: 8,
            alpha: DEFAULT_ALPHA,
            sigma_mode: SigmaMode::Softplus,
            epsilon: DEFAULT_EPSILON,
            s_init: None,
            theta_init: ThetaInit::Gaussian,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch_size: 128,
            max_steps: 3000,
            eval_interval: 50,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn s_init_value(&self) -> f64 {
        self.s_init.unwrap_or_else(|| self.sigma_mode.default_init())
    }

    /// Copy with every mode-dependent default written out explicitly.
    pub fn resolved(&self) -> Self {
        Self {
            s_init: Some(self.s_init_value()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite_pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let finite_nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        if self.depth < 1 {
            return Err(invalid("depth must be at least 1"));
        }
        if self.branching < 2 {
            return Err(invalid("branching must be at least 2"));
        }
        if self.per_concept < 1 {
            return Err(invalid("per_concept must be at least 1"));
        }
        if self.d_feat == 0 || self.d_emb == 0 {
            return Err(invalid("d_feat and d_emb must be positive"));
        }
        if self.method != Method::Base && (self.rank == 0 || self.rank > self.d_feat.min(self.d_emb)) {
            return Err(invalid(format!(
                "rank must lie in 1..={}, got {}",
                self.d_feat.min(self.d_emb),
                self.rank
            )));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(invalid(format!("mix must lie in [0, 1], got {}", self.mix)));
        }
        finite_nonneg("noise", self.noise)?;
        finite_nonneg("gamma", self.gamma)?;
        finite_pos("temperature", self.temperature)?;
        finite_pos("alpha", self.alpha)?;
        finite_pos("epsilon", self.epsilon)?;
        finite_nonneg("min_delta", self.min_delta)?;
        if let Some(s) = self.s_init {
            if !s.is_finite() {
                return Err(invalid("s_init must be finite"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval must be positive"));
        }
        self.adam().validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are ignored.
    /// Keys not mentioned keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        self.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Sets fields from textual `(key, value)` pairs; later pairs win.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), ConfigError> {
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        for (key, raw) in pairs {
            let key = key.replace('-', "_");
            if !Self::KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            let value = match serde_json::from_str::<Value>(raw) {
                Ok(v @ (Value::Number(_) | Value::Bool(_))) => v,
                _ => Value::String(raw.to_ascii_lowercase()),
            };
            map.insert(key, value);
        }
        *self = Self::from_json_object(map)?;
        Ok(())
    }

    fn from_json_object(map: Map<String, Value>) -> Result<Self, ConfigError> {
        serde_json::from_value(Value::Object(map)).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("unknown field `") {
                Some(rest) => ConfigError::UnknownKey(rest.split('`').next().unwrap_or(rest).to_string()),
                None => ConfigError::BadValue {
                    key: "config".into(),
                    message: msg,
                },
            }
        })
    }

    /// Accepts a bare config object or a manifest with a `config` member.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.line(),
            message: e.to_string(),
        })?;
        let obj = match value {
            Value::Object(mut m) => match m.remove("config") {
                Some(Value::Object(inner)) => inner,
                Some(_) => return Err(invalid("`config` member is not an object")),
                None => m,
            },
            _ => return Err(invalid("expected a JSON object")),
        };
        Self::from_json_object(obj)
    }

    /// JSON if the text starts with `{`, `key=value` otherwise.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            Self::from_json_str(text)
        } else {
            Self::from_kv_str(text)
        }
    }

    /// Flat `key=value` rendering that [`RunConfig::from_kv_str`] reads back exactly.
    pub fn to_kv_string(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!()
        };
        let mut out = String::new();
        for key in Self::KEYS {
            if let Some(v) = map.get(*key) {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let _ = writeln!(out, "{key}={text}");
            }
        }
        out
    }

    pub const KEYS: &'static [&'static str] = &[
        "method",
        "seed",
        "depth",
        "branching",
        "gamma",
        "per_concept",
        "noise",
        "mix",
        "d_feat",
        "d_emb",
        "temperature",
        "rank",
        "alpha",
        "sigma_mode",
        "epsilon",
        "s_init",
        "theta_init",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "batch_size",
        "max_steps",
        "eval_interval",
        "patience",
        "min_delta",
    ];
}

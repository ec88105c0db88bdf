//! `key = value` run configuration.
//!
//! Keys address fields of the model and training configs by path, e.g.
//! `model.hidden_dim = 16`, `train.adam.lr = 0.01`, `train.patience = none`.
//! Two top-level keys control the edge split: `split = 0.8,0.1,0.1` and
//! `split_seed = 0`.

use nbfrec::model::ModelConfig;
use nbfrec::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") || raw.is_empty() {
        return Value::Null;
    }
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Ok(v) = serde_json::from_str(&format!("[{raw}]")) {
            return v;
        }
    }
    Value::String(raw.to_string())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| format!("'{key}' is not a config key"))?;
        let slot = obj.get_mut(*part).ok_or_else(|| format!("unknown config key '{key}'"))?;
        if k + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Applies `key=value` assignments on top of `self`.
    pub fn apply<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, String> {
        let mut root = serde_json::to_value(self).map_err(|e| e.to_string())?;
        for (key, value) in pairs {
            set_path(&mut root, key.trim(), parse_value(value))?;
        }
        let config: RunConfig = serde_json::from_value(root).map_err(|e| format!("bad config value: {e}"))?;
        config.model.validate().map_err(|e| e.to_string())?;
        config.train.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    /// Parses a file of `key = value` lines; `#` starts a comment.
    pub fn from_text(&self, text: &str) -> Result<Self, String> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

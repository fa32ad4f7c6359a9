use std::path::Path;

use serde_json::{Map, Value};

use unicorn_core::training::TrainConfig;
use unicorn_core::unetnode::ArchConfig;

use crate::CliError;

/// Architecture and training settings read from one flat JSON object whose
/// keys are the field names of [`ArchConfig`] and [`TrainConfig`]. Missing
/// keys take the library defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

impl RunConfig {
    /// Every key accepted in a config file.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = Self::default().to_json().as_object().expect("object").keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = &value else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let known = Self::known_keys();
        let mut unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known.iter().any(|n| n == k)).collect();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg = Self {
            arch: serde_json::from_value(value.clone())?,
            train: serde_json::from_value(value)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.arch.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Flat JSON object, the same shape a config file has.
    pub fn to_json(&self) -> Value {
        let mut map = object(serde_json::to_value(&self.arch).expect("serializable"));
        map.extend(object(serde_json::to_value(&self.train).expect("serializable")));
        Value::Object(map)
    }
}

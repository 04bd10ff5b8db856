//! Flat key-value experiment configuration (TOML syntax).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Keys the command-line tool understands.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "step_size",
    "control_length",
    "count",
    "domain",
    "epochs",
    "learning_rate",
    "batch_size",
    "l2_coefficient",
    "frame_len",
    "latency",
    "initial_filter",
    "duration",
    "segment_seconds",
    "noise",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, toml::Value>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Configuration(e.message().to_string()))?;
        let mut values = BTreeMap::new();
        for (k, v) in table {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::Configuration(format!("unknown key {k:?}")));
            }
            if matches!(v, toml::Value::Table(_) | toml::Value::Array(_)) {
                return Err(Error::Configuration(format!("key {k:?} must hold a single value")));
            }
            values.insert(k, v);
        }
        Ok(Config { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(*v)),
            Some(toml::Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(other) => Err(Error::Configuration(format!("{key} must be a number, got {other}"))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
            Some(other) => Err(Error::Configuration(format!(
                "{key} must be a non-negative integer, got {other}"
            ))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    pub fn str(&self, key: &str) -> Result<Option<&str>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(Error::Configuration(format!("{key} must be a string, got {other}"))),
        }
    }
}

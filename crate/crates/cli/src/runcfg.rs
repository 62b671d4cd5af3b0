//! Run configuration: a flat namespaced key scheme (`train.lr`,
//! `fusion.heads`, `retrieval.k`, `world.n_fine`, ...) loaded from a JSON
//! file, overridden by flags, and echoed verbatim into every output so runs
//! stay reproducible from their artifacts alone.

use std::collections::BTreeMap;
use std::path::Path;

use reco_core::error::{Error, Result};
use serde_json::Value;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let raw: BTreeMap<String, Value> = serde_json::from_slice(&std::fs::read(path)?)?;
            for (k, v) in raw {
                cfg.map.insert(k, v);
            }
        }
        Ok(cfg)
    }

    /// Flag overrides win over file values.
    pub fn set(&mut self, key: &str, value: Value) {
        self.map.insert(key.to_string(), value);
    }

    pub fn set_if<T: Into<Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.map.insert(key.to_string(), v.into());
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::InvalidConfig(format!("{key} must be a non-negative integer"))),
        }
    }

    /// Seed precedence: explicit key, then the RECO_SEED environment
    /// variable, then zero.
    pub fn resolve_seed(&self) -> Result<u64> {
        if let Some(s) = self.get_u64("seed")? {
            return Ok(s);
        }
        if let Ok(env) = std::env::var("RECO_SEED") {
            return env
                .parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("RECO_SEED='{env}' is not an integer")));
        }
        Ok(0)
    }

    /// Fill a serde-serializable defaults struct with every `prefix.*` key.
    pub fn apply_prefix<T>(&self, prefix: &str, defaults: &T) -> Result<T>
    where
        T: serde::Serialize + serde::de::DeserializeOwned,
    {
        let mut obj = serde_json::to_value(defaults)?;
        let table = obj
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig("defaults must serialize to an object".into()))?;
        for (k, v) in &self.map {
            if let Some(field) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                if !table.contains_key(field) {
                    return Err(Error::InvalidConfig(format!("unknown config key '{k}'")));
                }
                table.insert(field.to_string(), v.clone());
            }
        }
        Ok(serde_json::from_value(obj)?)
    }

    /// Canonical JSON of the resolved configuration (sorted keys).
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(&self.map).expect("config serializes")
    }

    pub fn as_value(&self) -> Value {
        serde_json::to_value(&self.map).expect("config serializes")
    }
}

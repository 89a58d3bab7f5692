use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::Failure;

/// Values from the optional `--config` file. Explicit flags always win.
#[derive(Debug, Default)]
pub struct Settings {
    values: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        match serde_json::from_str::<Value>(text).map_err(|e| e.to_string())? {
            Value::Object(values) => {
                if let Some((k, _)) = values.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                    return Err(format!("key '{k}' is nested; the config must be flat"));
                }
                Ok(Self { values })
            }
            _ => Err("the config must be a JSON object".into()),
        }
    }

    fn raw(&self, key: &str) -> Option<String> {
        self.values.get(key).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    /// `flag`, else the file's `key`, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|e| Failure::Usage(format!("config key '{key}' = '{s}': {e}"))),
            None => Ok(default),
        }
    }

    /// Like [`pick`](Self::pick) for values without a default.
    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        let flag_name = key.replace('_', "-");
        let s = self
            .raw(key)
            .ok_or_else(|| Failure::Usage(format!("missing --{flag_name} (or config key '{key}')")))?;
        s.parse()
            .map_err(|e| Failure::Usage(format!("config key '{key}' = '{s}': {e}")))
    }
}

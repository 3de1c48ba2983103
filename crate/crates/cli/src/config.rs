//! Flat-JSON config files mirroring the CLI flags; flags override file
//! values, file values override built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub struct FileConfig(Option<Map<String, Value>>);

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig(None)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let value: Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                match value {
                    Value::Object(map) => Ok(FileConfig(Some(map))),
                    _ => bail!("config {} must be a flat JSON object", p.display()),
                }
            }
        }
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match &self.0 {
            None => Ok(None),
            Some(map) => match map.get(key) {
                None => Ok(None),
                Some(v) => serde_json::from_value(v.clone())
                    .map(Some)
                    .with_context(|| format!("config key {key:?}")),
            },
        }
    }
}

/// flag > config file > default
pub fn pick<T: DeserializeOwned>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T> {
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

/// flag > config file > absent
pub fn pick_opt<T: DeserializeOwned>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<T>> {
    Ok(match flag {
        Some(v) => Some(v),
        None => file.get(key)?,
    })
}

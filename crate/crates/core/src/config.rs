//! Flat `key = value` configuration with a canonical text form and a stable hash.
//!
//! Files are TOML; nested tables are flattened to dotted keys. The canonical
//! form lists every key in sorted order, one `key = value` per line, and its
//! SHA-256 (first 16 hex digits) is the config hash embedded in run outputs.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
pub use toml::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries);
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.entries.iter()
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Keys under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> FlatConfig {
        let p = format!("{prefix}.");
        FlatConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> FlatConfig {
        FlatConfig {
            entries: self.entries.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect(),
        }
    }

    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    fn require(&self, key: &str) -> Result<&Value> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        match self.require(key)? {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            other => Err(Error::Config(format!("`{key}` must be a non-negative integer, got {other}"))),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get_usize(key).map(|v| v as u64)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        match self.require(key)? {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(Error::Config(format!("`{key}` must be a number, got {other}"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            Value::Boolean(b) => Ok(*b),
            other => Err(Error::Config(format!("`{key}` must be a boolean, got {other}"))),
        }
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.require(key)? {
            Value::String(s) => Ok(s),
            other => Err(Error::Config(format!("`{key}` must be a string, got {other}"))),
        }
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.require(key)? {
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    other => Err(Error::Config(format!("`{key}` entries must be non-negative integers, got {other}"))),
                })
                .collect(),
            other => Err(Error::Config(format!("`{key}` must be an integer list, got {other}"))),
        }
    }

    /// Apply `overrides` on top of `self`, rejecting keys absent from `self`
    /// and values whose kind differs (integers are accepted where floats are).
    pub fn overlay_known(&mut self, overrides: &FlatConfig) -> Result<()> {
        for (k, v) in &overrides.entries {
            let Some(current) = self.entries.get(k) else {
                return Err(Error::Config(format!("unknown key `{k}`")));
            };
            let v = match (current, v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
                (a, b) if std::mem::discriminant(a) == std::mem::discriminant(b) => b.clone(),
                (a, b) => {
                    return Err(Error::Config(format!("`{k}` expects a value like {a}, got {b}")));
                }
            };
            self.entries.insert(k.clone(), v);
        }
        Ok(())
    }
}

pub fn usize_list(values: &[usize]) -> Value {
    Value::Array(values.iter().map(|&v| Value::Integer(v as i64)).collect())
}

//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, later assignments win.
//! Commands resolve each knob through the typed getters, falling back to
//! their built-in defaults, and validate the whole file against their
//! known-key list so a misspelled knob fails loudly instead of silently
//! using a default.

use crate::{CliError, CliResult};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn from_text(text: &str) -> CliResult<Config> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Data(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Data(format!("config line {}: empty key", lineno + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn from_file(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
        Config::from_text(&text)
    }

    /// Command-line override; replaces any file-provided value.
    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Entries in sorted key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Rejects keys outside the command's vocabulary.
    pub fn validate_keys(&self, known: &[&str]) -> CliResult<()> {
        for key in self.map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(CliError::Data(format!("unknown config key '{}'", key)));
            }
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> CliResult<T> {
        raw.parse().map_err(|_| {
            CliError::Data(format!("config key '{}': cannot parse '{}'", key, raw))
        })
    }

    pub fn get_f64(&self, key: &str, default: f64) -> CliResult<f64> {
        match self.map.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> CliResult<usize> {
        match self.map.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.map.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => {
                Err(CliError::Data(format!("config key '{}': '{}' is not a bool", key, other)))
            }
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.map.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated list, e.g. `seeds = 0,1,2`.
    pub fn get_list<T: FromStr>(&self, key: &str, default: &[T]) -> CliResult<Vec<T>>
    where
        T: Clone,
    {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|part| self.parse(key, part.trim()))
                .collect(),
        }
    }

    /// Serializes in key order; `from_text` of the result round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

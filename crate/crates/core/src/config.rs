//! Text key-value run configuration.
//!
//! ```text
//! # comment
//! lr = 5e-4
//! strategy = per-element
//! ```
//!
//! Each command declares the keys it understands together with their
//! defaults. Values from a file are applied first, then command-line
//! overrides; unknown keys are rejected at either stage. The resolved form
//! lists every key, so a dump alone reproduces the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A recognised key and its default (`None` for required keys).
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    command: String,
    schema: Vec<Key>,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str, schema: &[Key]) -> Self {
        let values = schema
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        RunConfig {
            command: command.to_string(),
            schema: schema.to_vec(),
            values,
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn schema(&self) -> &[Key] {
        &self.schema
    }

    /// Overrides a single key.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let name = name.trim().replace('-', "_");
        if !self.schema.iter().any(|k| k.name == name) {
            let known: Vec<&str> = self.schema.iter().map(|k| k.name).collect();
            return Err(Error::Config(format!(
                "unknown key '{name}' for {}; known keys: {}",
                self.command,
                known.join(", ")
            )));
        }
        self.values.insert(name, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn is_set(&self, name: &str) -> bool {
        self.values.get(name).is_some_and(|v| !v.is_empty())
    }

    pub fn raw(&self, name: &str) -> Result<&str> {
        debug_assert!(self.schema.iter().any(|k| k.name == name), "undeclared key {name}");
        self.values
            .get(name)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Config(format!("missing required key '{name}'")))
    }

    pub fn get<T>(&self, name: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let raw = self.raw(name)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("invalid value '{raw}' for '{name}': {e}")))
    }

    /// `None` when the key is empty.
    pub fn get_opt<T>(&self, name: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if self.is_set(name) {
            self.get(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Fully resolved `key = value` text, keys sorted.
    pub fn dump(&self) -> String {
        let mut out = format!("# {}\n", self.command);
        for k in &self.schema {
            let v = self.values.get(k.name).map(String::as_str).unwrap_or("");
            out.push_str(&format!("{} = {}\n", k.name, v));
        }
        out
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &[Key] = &[
        key("lr", "5e-5", "learning rate"),
        key("sigma", "0.10", "ratio spread"),
        required("corpus", "input"),
    ];

    #[test]
    fn file_then_flags() {
        let mut c = RunConfig::new("train", SCHEMA);
        c.apply_text("# header\nlr = 1e-3  # inline\n\ncorpus = toy\n").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), 1e-3);
        c.set_pair("lr=2e-3").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), 2e-3);
        assert_eq!(c.get::<f64>("sigma").unwrap(), 0.10);
        assert_eq!(c.raw("corpus").unwrap(), "toy");
    }

    #[test]
    fn unknown_keys_and_missing_values_rejected() {
        let mut c = RunConfig::new("train", SCHEMA);
        assert!(c.apply_text("lrr = 1").is_err());
        assert!(c.set_pair("novalue").is_err());
        assert!(c.raw("corpus").is_err());
        c.set("lr", "abc").unwrap();
        assert!(c.get::<f64>("lr").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::new("train", SCHEMA);
        c.set("corpus", "a.cubq").unwrap();
        let mut d = RunConfig::new("train", SCHEMA);
        d.apply_text(&c.dump()).unwrap();
        assert_eq!(c.dump(), d.dump());
        assert!(c.dump().contains("sigma = 0.10"));
    }
}

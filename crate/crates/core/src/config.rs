//! Flat `key = value` text configuration, used both for experiment configs
//! and for the manifests written next to every report.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments of
//! the same key win, so command-line overrides are appended last.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SalError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_assignment(line)
                .map_err(|e| SalError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SalError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` string, as given to `--set`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| SalError::Config(format!("expected key=value, got `{assignment}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(SalError::Config(format!("empty key in `{assignment}`")));
        }
        self.set(k, v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| SalError::Config(format!("{key} = `{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.entries.get(key) else {
            return Ok(None);
        };
        if v.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e| SalError::Config(format!("{key}: item `{item}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Rejects keys outside `known`; entries under a listed `prefix.` pass.
    pub fn check_known(&self, known: &[&str], prefixes: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .keys()
            .filter(|k| !known.contains(k))
            .filter(|k| !prefixes.iter().any(|p| k.starts_with(p)))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(SalError::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

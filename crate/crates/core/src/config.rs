//! Flat `key = value` configuration text.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value        # trailing comments allowed
//! list_key = 1, 2, 3
//! ```
//!
//! Keys are `[A-Za-z0-9_.]+`; values run to the end of the line (or a `#`)
//! and are trimmed. Duplicate keys are an error. Values set from the command
//! line override file values. Every parse error cites the offending line.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where a value came from, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, Origin)>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl KvConfig {
    pub fn new() -> KvConfig {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut cfg = KvConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::ConfigParse { line, message: format!("invalid key `{key}`") });
            }
            if let Some((_, Origin::Line(prev))) = cfg.entries.get(key) {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("duplicate key `{key}` (first set on line {prev})"),
                });
            }
            cfg.entries.insert(key.to_string(), (value.trim().to_string(), Origin::Line(line)));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<KvConfig> {
        KvConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or overrides a value.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), Origin::Override));
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    /// Copies every entry of `other` over `self`; `other` wins.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn error(&self, key: &str, message: String) -> Error {
        match self.entries.get(key).map(|(_, o)| *o) {
            Some(Origin::Line(line)) => Error::ConfigParse { line, message },
            _ => Error::InvalidArgument(format!("config value `{key}`: {message}")),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| self.error(key, format!("cannot parse `{key} = {v}`: {e}"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>()
                        .map_err(|e| self.error(key, format!("cannot parse list item `{item}` of `{key}`: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Rejects keys outside `known`, citing the line of the first offender.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(self.error(key, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Error for a value that parsed but failed validation.
    pub fn invalid_value(&self, key: &str, message: impl Into<String>) -> Error {
        self.error(key, message.into())
    }

    /// Canonical text: entries sorted by key, one `key=value` per line.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, (v, _)) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

/// Formats a list for a config value.
pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

//! Flat `key=value` text configuration.
//!
//! One entry per line, `#` starts a comment. Keys may carry a section prefix
//! (`train.lr_max=1e-5`). Later entries override earlier ones.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            map.insert(k, v.trim());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let head = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// A struct that round-trips through flat `key=value` pairs.
pub trait KeyValue: Sized {
    /// Every key accepted by [`set`](Self::set).
    fn keys() -> &'static [&'static str];

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Checks cross-field invariants after all keys have been applied.
    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn apply(&mut self, map: &KvMap) -> Result<()> {
        for (k, v) in map.iter() {
            if !Self::keys().contains(&k) {
                return Err(unknown_key(k, Self::keys()));
            }
            self.set(k, v)?;
        }
        self.validate()
    }

    fn to_kv(&self, prefix: &str) -> KvMap {
        let mut map = KvMap::default();
        for (k, v) in self.entries() {
            if prefix.is_empty() {
                map.insert(k, &v);
            } else {
                map.insert(&format!("{prefix}.{k}"), &v);
            }
        }
        map
    }
}

pub fn unknown_key(key: &str, valid: &[&str]) -> Error {
    Error::config(format!("unknown key {key:?}; valid keys: {}", valid.join(", ")))
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::config(format!("{key}={value}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}={value}: expected true/false"))),
    }
}

/// Comma-separated list; the empty string is the empty list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

//! Flat `key=value` text. One pair per line; blank lines and `#` comments
//! are skipped. Keys are unique.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::error::{bail, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    pairs: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Format, "line {}: expected key=value, got {:?}", n + 1, line);
            };
            let k = k.trim();
            if k.is_empty() {
                bail!(Format, "line {}: empty key", n + 1);
            }
            if map.get_str(k).is_some() {
                bail!(Format, "line {}: duplicate key {:?}", n + 1, k);
            }
            map.pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(map)
    }

    /// Inserts or replaces.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    /// Removes `key`, returning its value.
    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(i).1)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed value, `None` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => match v.parse() {
                Ok(x) => Ok(Some(x)),
                Err(_) => bail!(Config, "bad value for {}: {:?}", key, v),
            },
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        match self.get(key)? {
            Some(v) => Ok(v),
            None => bail!(Format, "missing key {}", key),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

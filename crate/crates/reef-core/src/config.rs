//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Keys may be dotted
//! (`ops.conv2d`). This is deliberately minimal: both the device profile and
//! the runtime read the same format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KvMap> {
        let text = std::fs::read_to_string(path)?;
        KvMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: `{s}` is not a number"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: `{s}` is not an unsigned integer"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") | Some("1") => Ok(Some(true)),
            Some("false") | Some("0") => Ok(Some(false)),
            Some(s) => Err(Error::Config(format!("{key}: `{s}` is not a boolean"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let kv =
            KvMap::parse("a = 1\n# full comment\nops.add = 2.5 # trailing\n\n b.c= x\n").unwrap();
        assert_eq!(kv.get_usize("a").unwrap(), Some(1));
        assert_eq!(kv.get_f64("ops.add").unwrap(), Some(2.5));
        assert_eq!(kv.get("b.c"), Some("x"));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvMap::parse("just words\n").is_err());
        assert!(KvMap::parse("= 3\n").is_err());
        let kv = KvMap::parse("n = notanumber\n").unwrap();
        assert!(kv.get_f64("n").is_err());
    }
}

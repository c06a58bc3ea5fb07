use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use super::{read_file, IoError};

#[derive(Debug, Error)]
pub enum KvError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("`{key}`: cannot parse `{value}`: {msg}")]
    Value { key: String, value: String, msg: String },
}

/// Flat `key = value` text. `#` starts a comment line; keys are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut out = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| KvError::Syntax {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(bad("keys must be a single word"));
            }
            if out.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(&format!("duplicate key `{k}`")));
            }
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self, KvError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| KvError::Syntax {
            line: 0,
            msg: "file is not UTF-8".into(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Parses `key` if present.
    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>, KvError>
    where
        V::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: V::Err| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }

    /// Entries of `other` replace ours.
    pub fn merge(&mut self, other: &KvFile) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for KvFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let kv = KvFile::parse("# run\nlr = 0.001\n\n  epochs=3  \n").unwrap();
        assert_eq!(kv.get("lr"), Some("0.001"));
        assert_eq!(kv.parse_value::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(KvFile::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(KvFile::parse("lr 1"), Err(KvError::Syntax { line: 1, .. })));
        assert!(matches!(KvFile::parse("a = 1\na = 2"), Err(KvError::Syntax { line: 2, .. })));
        assert!(matches!(KvFile::parse("two words = 1"), Err(KvError::Syntax { .. })));
        let kv = KvFile::parse("epochs = many").unwrap();
        assert!(matches!(kv.parse_value::<usize>("epochs"), Err(KvError::Value { .. })));
    }

    #[test]
    fn merge_overrides() {
        let mut a = KvFile::parse("lr = 1\nseed = 2").unwrap();
        a.merge(&KvFile::parse("seed = 3").unwrap());
        assert_eq!(a.get("seed"), Some("3"));
        assert_eq!(a.get("lr"), Some("1"));
    }
}

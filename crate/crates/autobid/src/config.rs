//! Line-based `key=value` configuration files.
//!
//! The format is deliberately plain: one `key=value` per line, `#` comments,
//! blank lines ignored. Section headers `[name]` introduce blocks whose lines
//! are collected verbatim (used for inline CSV tables in oracle MDP files).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing key '{0}'")]
    Missing(String),
    #[error("key '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    pairs: BTreeMap<String, String>,
    sections: BTreeMap<String, Vec<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                let name = line[1..line.len() - 1].trim().to_string();
                if name.is_empty() {
                    return Err(ConfigError::Parse { line: i + 1, msg: "empty section name".into() });
                }
                kv.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            if let Some(name) = &section {
                kv.sections.get_mut(name).unwrap().push(line.to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: format!("expected key=value, got '{line}'"),
                });
            };
            kv.pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    pub fn section(&self, name: &str) -> Option<&[String]> {
        self.sections.get(name).map(|v| v.as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(|s| s.as_str())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| ConfigError::Value {
                key: key.into(),
                msg: format!("'{s}' is not a real number"),
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| ConfigError::Value {
                key: key.into(),
                msg: format!("'{s}' is not a nonnegative integer"),
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| ConfigError::Value {
                key: key.into(),
                msg: format!("'{s}' is not a nonnegative integer"),
            }),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Parse "lo,hi" into an inclusive range pair.
    pub fn range_or(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(|p| p.trim()).collect();
                if parts.len() != 2 {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        msg: format!("expected 'lo,hi', got '{s}'"),
                    });
                }
                let lo = parts[0].parse().map_err(|_| ConfigError::Value {
                    key: key.into(),
                    msg: format!("'{}' is not a real number", parts[0]),
                })?;
                let hi = parts[1].parse().map_err(|_| ConfigError::Value {
                    key: key.into(),
                    msg: format!("'{}' is not a real number", parts[1]),
                })?;
                Ok((lo, hi))
            }
        }
    }
}

/// FNV-1a over a canonical string; reports carry this so runs are traceable
/// to their exact configuration.
pub fn text_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_sections() {
        let text = "# comment\nfoo = 1.5\nbar=2\n\n[table]\n0,1,2\n3,4,5\n";
        let kv = KvFile::parse(text).unwrap();
        assert_eq!(kv.f64_or("foo", 0.0).unwrap(), 1.5);
        assert_eq!(kv.usize_or("bar", 0).unwrap(), 2);
        assert_eq!(kv.usize_or("absent", 9).unwrap(), 9);
        assert_eq!(kv.section("table").unwrap(), &["0,1,2".to_string(), "3,4,5".to_string()]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = KvFile::parse("ok=1\nnot a pair\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn range_parsing() {
        let kv = KvFile::parse("r=0.5, 2.5\n").unwrap();
        assert_eq!(kv.range_or("r", (0.0, 0.0)).unwrap(), (0.5, 2.5));
        assert!(KvFile::parse("r=1\n").unwrap().range_or("r", (0.0, 0.0)).is_err());
    }
}

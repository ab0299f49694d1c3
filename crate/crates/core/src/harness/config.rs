//! `key = value` run-configuration files.
//!
//! Keys are CLI long-flag names (`hidden`, `learning-rate`, …; underscores
//! are accepted as dashes). Blank lines and text after `#` are ignored.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim().replace('_', "-");
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            entries.push((key, value.trim().to_string()));
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let c = ConfigFile::parse("# run\nhidden = 16\nlearning_rate=0.05  # per sample\n\n").unwrap();
        assert_eq!(c.get("hidden"), Some("16"));
        assert_eq!(c.get("learning-rate"), Some("0.05"));
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            ConfigFile::parse("a = 1\nnonsense"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ConfigFile::parse("a = 1\na = 2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(ConfigFile::parse(" = 2"), Err(Error::Parse { line: 1, .. })));
    }
}

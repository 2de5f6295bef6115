//! `key = value` config text with optional `[section]` headers. `#` starts a
//! comment. Keys appearing before any header belong to the unnamed section.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub section: String,
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("[{}] missing key `{key}`", self.section)))?;
        raw.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!("[{}] bad value for `{key}`: `{raw}`", self.section))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigText {
    pub sections: Vec<KeyValues>,
}

impl ConfigText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![KeyValues::default()];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if sections.iter().any(|s| s.section == name) {
                    return Err(Error::InvalidConfig(format!("duplicate section [{name}]")));
                }
                sections.push(KeyValues {
                    section: name,
                    entries: Vec::new(),
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
            }
            sections.last_mut().unwrap().set(k, v.trim());
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::InvalidConfig(format!("config file {} not found", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text)
    }

    /// Named section, or an empty one if absent.
    pub fn section(&self, name: &str) -> KeyValues {
        self.sections
            .iter()
            .find(|s| s.section == name)
            .cloned()
            .unwrap_or_else(|| KeyValues {
                section: name.to_string(),
                entries: Vec::new(),
            })
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.section.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = ConfigText::parse("top = 1\n[corpus]\nwords = 5 # five\n\n[hmm]\nmix=3\n").unwrap();
        assert_eq!(c.section("").get("top"), Some("1"));
        assert_eq!(c.section("corpus").parse::<usize>("words").unwrap(), 5);
        assert_eq!(c.section("hmm").get("mix"), Some("3"));
        assert!(c.section("svm").is_empty());
    }

    #[test]
    fn malformed_lines() {
        assert!(ConfigText::parse("nonsense").is_err());
        assert!(ConfigText::parse("[a]\n[a]\n").is_err());
        assert!(ConfigText::parse("= 4").is_err());
    }
}

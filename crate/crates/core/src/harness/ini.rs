//! INI-style configuration: `[section]` headers, `key = value` lines,
//! comma-separated lists and `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ini {
    sections: Vec<Section>,
}

fn err(line: usize, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {message}"))
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, format!("unterminated section header {content:?}")))?
                    .trim();
                if name.is_empty() {
                    return Err(err(line, "empty section name"));
                }
                if let Some(prev) = sections.iter().find(|s| s.name == name) {
                    return Err(err(line, format!("section [{name}] already defined on line {}", prev.line)));
                }
                sections.push(Section { name: name.to_string(), line, entries: BTreeMap::new() });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, found {content:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err(line, "empty key"));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| err(line, format!("key {key:?} appears before any section")))?;
            if let Some(prev) = section.entries.get(key) {
                return Err(err(line, format!("duplicate key {key:?} (first on line {})", prev.line)));
            }
            section.entries.insert(key.to_string(), Entry { value: value.trim().to_string(), line });
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| Error::Config(format!("missing section [{name}]")))
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }
}

impl Section {
    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, e) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(err(e.line, format!("unknown key {k:?} in [{}]", self.name)));
            }
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.str(key)
            .ok_or_else(|| err(self.line, format!("section [{}] is missing key {key:?}", self.name)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => parse_value(&e.value, e.line, key).map(Some),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require_value<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| err(self.line, format!("section [{}] is missing key {key:?}", self.name)))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => split_list(&e.value)
                .map(|item| parse_value(item, e.line, key))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                other => Err(err(e.line, format!("{key}: expected a boolean, found {other:?}"))),
            },
        }
    }

    /// A positive integer or `off`.
    pub fn optional_period(&self, key: &str, default: Option<usize>) -> Result<Option<usize>> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) if matches!(e.value.as_str(), "off" | "none") => Ok(None),
            Some(e) => parse_value(&e.value, e.line, key).map(Some),
        }
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entry(key).map_or(self.line, |e| e.line)
    }

    pub fn error(&self, key: &str, message: impl std::fmt::Display) -> Error {
        err(self.line_of(key), format!("{key}: {message}"))
    }
}

pub fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_value<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| err(line, format!("{key}: cannot parse {value:?}")))
}

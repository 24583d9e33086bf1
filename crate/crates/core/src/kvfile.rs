//! `name = value` text files with `#` comments.
//!
//! Values are numbers (decimal, scientific or `0x` hexadecimal) or
//! comma-separated lists of them. Keys are case-sensitive and may appear once.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}` (line {line}): {reason}")]
    Value { key: String, line: usize, reason: String },
    #[error("unknown key `{key}` (line {line})")]
    Unknown { key: String, line: usize },
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| KvError::Syntax { line, reason: format!("expected `name = value`, got `{content}`") })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(KvError::Syntax { line, reason: "empty key or value".into() });
            }
            if entries.insert(key.to_owned(), (line, value.to_owned())).is_some() {
                return Err(KvError::Syntax { line, reason: format!("duplicate key `{key}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), KvError> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((key, (line, _))) => Err(KvError::Unknown { key: key.clone(), line: *line }),
            None => Ok(()),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, KvError> {
        let (line, value) = self.raw(key)?;
        parse_f64(value).map_err(|reason| KvError::Value { key: key.into(), line, reason })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, KvError> {
        if self.contains(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, KvError> {
        let (line, value) = self.raw(key)?;
        parse_u64(value).map_err(|reason| KvError::Value { key: key.into(), line, reason })
    }

    /// Comma-separated list; an absent key yields an empty list.
    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>, KvError> {
        let Ok((line, value)) = self.raw(key) else {
            return Ok(Vec::new());
        };
        value
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| parse_u64(v).map_err(|reason| KvError::Value { key: key.into(), line, reason }))
            .collect()
    }

    fn raw(&self, key: &str) -> Result<(usize, &str), KvError> {
        self.entries.get(key).map(|(line, v)| (*line, v.as_str())).ok_or_else(|| KvError::Missing(key.into()))
    }
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    let cleaned: String = s.chars().filter(|c| *c != '_').collect();
    let parsed = match cleaned.strip_prefix("0x").or_else(|| cleaned.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => cleaned.parse::<u64>(),
    };
    parsed.map_err(|e| format!("`{s}` is not an unsigned integer ({e})"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    if s.starts_with("0x") || s.starts_with("0X") {
        return parse_u64(s).map(|v| v as f64);
    }
    let cleaned: String = s.chars().filter(|c| *c != '_').collect();
    let v: f64 = cleaned.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("`{s}` is not finite"));
    }
    Ok(v)
}

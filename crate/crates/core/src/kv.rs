//! `key = value` text with `#` comments, shared by the config and phantom
//! spec formats.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| Error::parse(self.line, format!("bad value '{}' for {}", self.value, self.key)))
    }

    /// Whitespace-separated list of values.
    pub fn parse_list<T: FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::parse(self.line, format!("bad element '{v}' for {}", self.key)))
            })
            .collect()
    }

    pub fn parse_array<T: FromStr + Copy + Default, const N: usize>(&self) -> Result<[T; N]> {
        let v: Vec<T> = self.parse_list()?;
        if v.len() != N {
            return Err(Error::parse(
                self.line,
                format!("{} expects {N} values, got {}", self.key, v.len()),
            ));
        }
        let mut out = [T::default(); N];
        out.copy_from_slice(&v);
        Ok(out)
    }
}

/// Parses lines, rejecting malformed and duplicate keys.
pub(crate) fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::parse(line, "expected 'key = value'"));
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::parse(line, format!("invalid key '{key}'")));
        }
        if value.is_empty() {
            return Err(Error::parse(line, format!("missing value for {key}")));
        }
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(Error::parse(line, format!("duplicate key {key} (first on line {prev})")));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

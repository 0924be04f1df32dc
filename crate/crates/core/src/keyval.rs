//! Flat sectioned `key = value` text, the format used for configuration
//! files and for the configuration block embedded in checkpoints.
//!
//! ```text
//! # comment
//! [model]
//! base = 16
//! aux_heads = h1,h2
//! ```
//!
//! Keys are consumed by typed readers; [`Document::finish`] rejects any key
//! that nothing consumed.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    pub fn qualified(&self) -> String {
        if self.section.is_empty() {
            self.key.clone()
        } else {
            format!("{}.{}", self.section, self.key)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Document {
    entries: Vec<Entry>,
    consumed: BTreeSet<usize>,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_ident(n))
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header '{line}'")))?;
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            if !valid_ident(key) {
                return Err(Error::Config(format!("line {line_no}: invalid key '{key}'")));
            }
            if doc.entries.iter().any(|e| e.section == section && e.key == key) {
                return Err(Error::Config(format!("line {line_no}: duplicate key '{section}.{key}'")));
            }
            doc.entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: value.trim().to_string(),
                line: line_no,
            });
        }
        Ok(doc)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Marks `section.key` consumed and returns its raw value.
    pub fn take(&mut self, section: &str, key: &str) -> Option<String> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.section == section && e.key == key)?;
        self.consumed.insert(idx);
        Some(self.entries[idx].value.clone())
    }

    /// Typed read with a default for absent keys.
    pub fn get_or<V: FromStr>(&mut self, section: &str, key: &str, default: V) -> Result<V> {
        match self.take(section, key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{section}.{key}'"))),
        }
    }

    /// Consumes every key of a section without interpreting it.
    pub fn skip_section(&mut self, section: &str) {
        for (i, e) in self.entries.iter().enumerate() {
            if e.section == section {
                self.consumed.insert(i);
            }
        }
    }

    /// Fails on the first key nothing consumed.
    pub fn finish(&self) -> Result<()> {
        match (0..self.entries.len()).find(|i| !self.consumed.contains(i)) {
            None => Ok(()),
            Some(i) => {
                let e = &self.entries[i];
                Err(Error::Config(format!("unknown key '{}' (line {})", e.qualified(), e.line)))
            }
        }
    }
}

/// Renders `(key, value)` pairs under a section header.
pub fn render_section(name: &str, pairs: &[(&str, String)]) -> String {
    let mut s = format!("[{name}]\n");
    for (k, v) in pairs {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

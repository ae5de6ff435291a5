//! Flat `key = value` text files.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored;
//! list values are comma-separated. Keys may not repeat.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries, remembering the line each key came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { path, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets or replaces a value, as a command-line override would.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    fn error(&self, key: &str, message: String) -> Error {
        match self.entries.get(key) {
            Some((_, line)) if *line > 0 => Error::Parse {
                path: self.path.clone(),
                line: *line,
                message,
            },
            _ => Error::config(message),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.get_raw(key) else { return Ok(None) };
        raw.parse()
            .map(Some)
            .map_err(|e| self.error(key, format!("bad value {raw:?} for {key}: {e}")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.get_raw(key) else { return Ok(None) };
        if raw.is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e| self.error(key, format!("bad list item {item:?} for {key}: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on any key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(self.error(key, format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }
}

/// Renders entries in the same format, one per line, in the given order.
pub fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses a `bool` accepting `true/false/1/0/yes/no`.
pub fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("expected a boolean, got {other:?}"))),
    }
}

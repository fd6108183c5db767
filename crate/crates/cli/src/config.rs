//! Line-based `key = value` config files with `[section]` headers.
//!
//! Every key can also be set by the command-line flag of the same name;
//! precedence is flags > file > built-in defaults. Lookup first tries the
//! section a command cares about (`[train]`, `[conv]`, `[eval]`), then keys
//! declared before any section header.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use gode_core::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    /// (section, key) → value; top-level keys use an empty section.
    values: HashMap<(String, String), String>,
}

/// Keys are matched with `-` and `_` interchangeable so a config line can
/// mirror either the flag spelling (`batch-size`) or the field spelling
/// (`batch_size`).
fn norm_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut values = HashMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::MalformedLine {
                    line: idx + 1,
                    reason: "unterminated section header".into(),
                })?;
                section = norm_key(name);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::MalformedLine {
                line: idx + 1,
                reason: "expected `key = value`".into(),
            })?;
            let key = norm_key(key);
            if key.is_empty() {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    reason: "empty key".into(),
                });
            }
            values.insert((section.clone(), key), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        ConfigFile::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        let key = norm_key(key);
        self.values
            .get(&(section.to_string(), key.clone()))
            .or_else(|| self.values.get(&(String::new(), key)))
            .map(String::as_str)
    }
}

/// flag > file > default, with file values parsed into the flag's type.
pub fn resolve<T>(
    flag: Option<T>,
    file: &ConfigFile,
    section: &str,
    key: &str,
    default: T,
) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(section, key) {
        Some(raw) => raw.parse().map_err(|e| {
            Error::InvalidConfig(format!("config key `{key}` = `{raw}`: {e}"))
        }),
        None => Ok(default),
    }
}

/// Comma-separated list variant of [`resolve`] (used for `ks`).
pub fn resolve_list<T>(
    flag: Option<Vec<T>>,
    file: &ConfigFile,
    section: &str,
    key: &str,
    default: Vec<T>,
) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(section, key) {
        Some(raw) => raw
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|e| {
                    Error::InvalidConfig(format!("config key `{key}` = `{raw}`: {e}"))
                })
            })
            .collect(),
        None => Ok(default),
    }
}

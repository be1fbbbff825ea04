//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! `#` and `;` start comments. Keys outside any section belong to the
//! unnamed section `""`. Every value remembers its line so that type errors
//! point at the offending line.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but untyped configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    origin: String,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
    section_lines: BTreeMap<String, usize>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: impl Into<String>) -> Result<Self> {
        let mut cfg = ConfigFile {
            origin: origin.into(),
            ..Default::default()
        };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg.error(line, "section header is missing ']'"))?
                    .trim();
                if name.is_empty() {
                    return Err(cfg.error(line, "empty section name"));
                }
                if let Some(prev) = cfg.section_lines.get(name) {
                    return Err(cfg.error(line, format!("section [{name}] already opened on line {prev}")));
                }
                section = name.to_string();
                cfg.section_lines.insert(section.clone(), line);
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| cfg.error(line, format!("expected 'key = value', got '{content}'")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(cfg.error(line, "missing key before '='"));
            }
            if let Some(prev) = cfg.entry(&section, key) {
                return Err(cfg.error(line, format!("key '{key}' already set on line {}", prev.line)));
            }
            cfg.sections.entry(section.clone()).or_default().insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.display().to_string())
    }

    /// Directory that relative paths in the file are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        Path::new(&self.origin).parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn error(&self, line: usize, msg: impl Display) -> Error {
        Error::Format(format!("{}:{line}: {msg}", self.origin))
    }

    /// Reject sections and keys not listed in `schema`.
    pub fn check_schema(&self, schema: &[(&str, &[&str])]) -> Result<()> {
        for (name, entries) in &self.sections {
            let Some((_, keys)) = schema.iter().find(|(s, _)| s == name) else {
                let line = self.section_lines.get(name).copied().unwrap_or(1);
                return Err(self.error(line, format!("unknown section [{name}]")));
            };
            for (key, e) in entries {
                if !keys.contains(&key.as_str()) {
                    return Err(self.error(e.line, format!("unknown key '{key}' in [{name}]")));
                }
            }
        }
        Ok(())
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.get(key)
    }

    /// Typed value, or `None` when the key is absent.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        e.value
            .parse()
            .map(Some)
            .map_err(|err| self.error(e.line, format!("[{section}] {key}: cannot parse '{}': {err}", e.value)))
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list, or `None` when the key is absent.
    pub fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        let items: Vec<&str> = e.value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(self.error(e.line, format!("[{section}] {key}: empty list")));
        }
        items
            .into_iter()
            .map(|item| {
                item.parse()
                    .map_err(|err| self.error(e.line, format!("[{section}] {key}: cannot parse '{item}': {err}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Path value resolved against the config file's directory.
    pub fn get_path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.raw(section, key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir().join(p)
            }
        })
    }

    /// Error tied to the line of `section.key` (or the file if absent).
    pub fn error_at(&self, section: &str, key: &str, msg: impl Display) -> Error {
        let line = self.entry(section, key).map(|e| e.line).unwrap_or(0);
        if line == 0 {
            Error::Format(format!("{}: {msg}", self.origin))
        } else {
            self.error(line, msg)
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

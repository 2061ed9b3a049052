//! Flat `key = value` configuration files with `[section]` headers.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    ini: Ini,
}

impl ConfigFile {
    pub fn parse_str(text: &str) -> Result<Self> {
        Ini::load_from_str(text)
            .map(|ini| Self { ini })
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingData(path.to_path_buf()));
        }
        Self::parse_str(&std::fs::read_to_string(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.get_from(Some(section), key)
    }

    /// Parses `section.key` if present.
    pub fn parsed<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|raw| {
                raw.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{section}.{key} = {raw:?}: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list.
    pub fn list<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|raw| {
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|e| Error::Config(format!("{section}.{key} item {s:?}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.ini.with_section(Some(section)).set(key, value.into());
    }

    /// Every `(section, key)` pair present; keys outside a section report
    /// an empty section name.
    pub fn entries(&self) -> Vec<(String, String)> {
        self.ini
            .iter()
            .flat_map(|(section, props)| {
                let section = section.unwrap_or("").to_string();
                props.iter().map(move |(k, _)| (section.clone(), k.to_string()))
            })
            .collect()
    }

    /// Fails on any key not listed in `known`.
    pub fn reject_unknown(&self, known: &[(&str, &str, &str)]) -> Result<()> {
        for (section, key) in self.entries() {
            if !known.iter().any(|(s, k, _)| *s == section && *k == key) {
                let name = if section.is_empty() { key } else { format!("{section}.{key}") };
                return Err(Error::Config(format!("unknown key {name}")));
            }
        }
        Ok(())
    }
}

//! Flat `key = value` config files. Command-line flags take precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Blank lines and lines starting with `#` are ignored. Keys use either
    /// `snake_case` or the flag spelling (`kebab-case`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got {line:?}", i + 1);
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                bail!("config line {}: empty key", i + 1);
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("config line {}: duplicate key {key}", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config file {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves settings for one subcommand and remembers what was used, so the
/// run can log its effective configuration.
pub struct Settings<'a> {
    config: &'a Config,
    resolved: Vec<(String, String)>,
}

impl<'a> Settings<'a> {
    pub fn new(config: &'a Config) -> Self {
        Self { config, resolved: Vec::new() }
    }

    /// Flag value, else config value, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (flag, self.config.raw(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s.parse().map_err(|e| anyhow::anyhow!("config key {key}: {e}"))?,
            (None, None) => default,
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (flag, self.config.raw(key)) {
            (Some(v), _) => Some(v),
            (None, Some(s)) => Some(s.parse().map_err(|e| anyhow::anyhow!("config key {key}: {e}"))?),
            (None, None) => None,
        };
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>, default: &str) -> PathBuf {
        let v = flag.or_else(|| self.config.raw(key).map(PathBuf::from)).unwrap_or_else(|| default.into());
        self.resolved.push((key.to_string(), v.display().to_string()));
        v
    }

    /// Space-separated `key=value` pairs in resolution order.
    pub fn summary(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

//! Flat `key=value` run configuration.
//!
//! Every command resolves its options in precedence order default < config
//! file < explicit flag, rejects keys it does not understand, and writes the
//! fully resolved set next to its outputs. Re-running a command with only
//! `--config <that file>` reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relit_core::{CoreError, Result};

/// Sorted key → value map with a one-line-per-entry text encoding.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    /// Parse a config file. Blank lines and `#` comments are allowed;
    /// anything else must be `key=value`, and a key may appear only once.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::Config(format!(
                    "config {} line {}: expected key=value, got {raw:?}",
                    path.display(),
                    ln + 1
                )));
            };
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CoreError::Config(format!(
                    "config {} line {}: duplicate key {key:?}",
                    path.display(),
                    ln + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Merges the optional config file with command-line flags (flags win),
/// parses typed values, and accumulates the resolved record. `finish`
/// rejects any file key no option ever claimed.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: KvConfig,
}

fn missing(key: &str) -> CoreError {
    let flag = key.replace('_', "-");
    CoreError::Config(format!(
        "missing required option `{key}` (pass --{flag} or set {key}= in a --config file)"
    ))
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        CoreError::Config(format!(
            "option `{key}`: cannot parse {raw:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

/// Parse a comma-separated list such as `1,2,4`.
pub fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|part| parse_value(key, part.trim())).collect()
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(path) => KvConfig::load(path)?.entries,
            None => BTreeMap::new(),
        };
        Ok(Self { file, resolved: KvConfig::default() })
    }

    /// Typed option that always has a value; the default is recorded when
    /// neither the flag nor the file provides one.
    pub fn parse_or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        let value = match (flag, self.file.remove(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => parse_value(key, &raw)?,
            (None, None) => default,
        };
        self.resolved.set(key, &value);
        Ok(value)
    }

    /// Typed option without a default; absent means absent.
    pub fn parse_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
    {
        let value = match (flag, self.file.remove(key)) {
            (Some(v), _) => Some(v),
            (None, Some(raw)) => Some(parse_value(key, &raw)?),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.set(key, v);
        }
        Ok(value)
    }

    pub fn path_opt(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let value = match (flag, self.file.remove(key)) {
            (Some(v), _) => Some(v),
            (None, Some(raw)) => Some(PathBuf::from(raw)),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.set(key, v.display());
        }
        value
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path_opt(key, flag).ok_or_else(|| missing(key))
    }

    /// Reject leftover (unclaimed) file keys and hand back the resolved
    /// record for writing next to the command's outputs.
    pub fn finish(self) -> Result<KvConfig> {
        if !self.file.is_empty() {
            let keys: Vec<&str> = self.file.keys().map(String::as_str).collect();
            return Err(CoreError::Config(format!(
                "unknown config keys: {}",
                keys.join(", ")
            )));
        }
        Ok(self.resolved)
    }
}

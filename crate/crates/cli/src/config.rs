//! Flat `key = value` run configuration with per-command key schemas.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A configuration problem, reported with where the offending value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// One accepted key and its default, if any.
pub type KeySpec = (&'static str, Option<&'static str>);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    entries: BTreeMap<String, Entry>,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str, source: &str) -> Result<Vec<(String, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = format!("{source}:{}", i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("{origin}: expected `key = value`, got `{line}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError(format!("{origin}: malformed key `{k}`")));
        }
        if out.iter().any(|(seen, _, _): &(String, String, String)| seen == k) {
            return Err(ConfigError(format!("{origin}: duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.to_string(), origin));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies defaults, then the config file, then overrides (in order).
    pub fn build(
        command: &'static str,
        schema: &[KeySpec],
        file: Option<&Path>,
        overrides: &[(String, String, String)],
    ) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (k, d) in schema {
            if let Some(d) = d {
                entries.insert(
                    k.to_string(),
                    Entry {
                        value: d.to_string(),
                        origin: "default".into(),
                    },
                );
            }
        }
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            layers.extend(parse_lines(&text, &path.display().to_string())?);
        }
        layers.extend(overrides.iter().cloned());
        for (k, v, origin) in layers {
            if !schema.iter().any(|(name, _)| *name == k) {
                let known: Vec<&str> = schema.iter().map(|(n, _)| *n).collect();
                return Err(ConfigError(format!(
                    "{origin}: unknown key `{k}` for `{command}` (accepted: {})",
                    known.join(", ")
                )));
            }
            entries.insert(k, Entry { value: v, origin });
        }
        Ok(Self { command, entries })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn entry(&self, key: &str) -> Result<&Entry, ConfigError> {
        self.entries
            .get(key)
            .ok_or_else(|| ConfigError(format!("`{}` requires key `{key}`", self.command)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let e = self.entry(key)?;
        e.value
            .parse()
            .map_err(|err| ConfigError(format!("{}: invalid value `{}` for `{key}`: {err}", e.origin, e.value)))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.has(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(&self.entry(key)?.value))
    }

    /// Fails with the value's origin attached.
    pub fn reject(&self, key: &str, why: impl fmt::Display) -> ConfigError {
        match self.entries.get(key) {
            Some(e) => ConfigError(format!("{}: invalid value `{}` for `{key}`: {why}", e.origin, e.value)),
            None => ConfigError(format!("`{key}`: {why}")),
        }
    }

    /// Resolved `key = value` lines, sorted by key.
    pub fn resolved(&self) -> Vec<(String, String)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.value.clone())).collect()
    }

    /// Comma-separated list, or an inclusive `a..b` integer range.
    pub fn list_usize(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let e = self.entry(key)?;
        let bad = |why: &str| ConfigError(format!("{}: invalid value `{}` for `{key}`: {why}", e.origin, e.value));
        if let Some((a, b)) = e.value.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad("range start"))?;
            let b: usize = b.trim().parse().map_err(|_| bad("range end"))?;
            if a > b {
                return Err(bad("empty range"));
            }
            return Ok((a..=b).collect());
        }
        e.value
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad("expected integers")))
            .collect()
    }
}

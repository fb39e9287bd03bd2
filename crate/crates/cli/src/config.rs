//! Optional `key = value` configuration file.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Keys use the long flag names with `_` or `-` (`min_score`,
//! `min-score`). Command-line flags override the file, which overrides the
//! built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "mode",
    "prefetch",
    "gate",
    "min_score",
    "level",
    "max_coast",
    "box_blend",
    "format",
    "data_weight",
    "huber_epsilon",
    "time_step",
    "warps",
    "iterations",
    "scales",
    "median_filter",
    "smoothing_weight",
    "blend",
    "rof_iterations",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    origin: String,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::input(format!("{origin}:{}: expected key = value", n + 1)));
            };
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::input(format!("{origin}:{}: unknown key {key:?}", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values, origin: origin.to_string() })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        debug_assert!(KEYS.contains(&key));
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::input(format!("{}: bad value {v:?} for {key}", self.origin))))
            .transpose()
    }

    /// The flag if given, else the file's value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_ranks_sources() {
        let c = ConfigFile::parse("# comment\nmin-score = 0.7\n\ngate=0.4\n", "test").unwrap();
        assert_eq!(c.pick(None, "min_score", 0.5).unwrap(), 0.7);
        assert_eq!(c.pick(Some(0.9), "min_score", 0.5).unwrap(), 0.9);
        assert_eq!(c.pick(None, "level", 3usize).unwrap(), 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ConfigFile::parse("colour = red", "t").is_err());
        assert!(ConfigFile::parse("gate", "t").is_err());
        let c = ConfigFile::parse("gate = wide", "t").unwrap();
        assert!(c.get::<f64>("gate").is_err());
    }
}

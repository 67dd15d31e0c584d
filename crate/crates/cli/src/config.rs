//! Flat `key=value` experiment configs.
//!
//! Blank lines and lines starting with `#` are ignored. Values are kept as
//! the exact strings given, so an echoed config re-parses to the same map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", lineno + 1)));
            }
            cfg.set(key, value.trim());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("missing config key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("cannot parse `{key}={raw}`")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Usage(format!("cannot parse `{key}={other}` as a bool"))),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("cannot parse `{s}` in `{key}`"))))
            .collect()
    }

    /// The echo written next to every run's outputs.
    pub fn echo(&self, subcommand: &str) -> String {
        format!("# fourierformer {subcommand}\n{self}")
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::parse("# c\nseed = 3\n\nladder=100,400\nlr=3e-4\n").unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 3);
        assert_eq!(cfg.get_list::<usize>("ladder").unwrap(), vec![100, 400]);
        assert_eq!(ExperimentConfig::parse(&cfg.echo("x")).unwrap(), cfg);
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        assert!(matches!(ExperimentConfig::parse("seed"), Err(CliError::Usage(_))));
        assert!(matches!(ExperimentConfig::parse("=4"), Err(CliError::Usage(_))));
        let cfg = ExperimentConfig::parse("flag=maybe").unwrap();
        assert!(cfg.get_bool("flag").is_err());
    }
}

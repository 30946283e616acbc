//! Plain-text `key = value` run configuration.
//!
//! No nesting, no quoting: one key per line, `#` comments, later keys win.
//! The same format is echoed back as the resolved-config manifest next to
//! every run's outputs, so manifests diff trivially and a re-run from a
//! manifest reproduces the outputs byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected `key = value`", idx + 1))?;
            let key = key.trim();
            if key.is_empty() {
                bail!("config line {}: empty key", idx + 1);
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config `{}`", path.display()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_or(key, default)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_or(key, default)
    }

    pub fn get_i64(&self, key: &str, default: i64) -> Result<i64> {
        self.parse_or(key, default)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_or(key, default)
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`")),
        }
    }

    /// The resolved manifest: sorted `key = value` lines.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_defaults_and_overrides() {
        let cfg = RunConfig::parse("# comment\nusers = 100\n\nseed=7\nusers = 200\n").unwrap();
        assert_eq!(cfg.get_usize("users", 1).unwrap(), 200);
        assert_eq!(cfg.get_u64("seed", 0).unwrap(), 7);
        assert_eq!(cfg.get_f64("absent", 2.5).unwrap(), 2.5);
        assert!(cfg.get_usize("seed", 0).is_ok());
    }

    #[test]
    fn rejects_bad_lines_and_bad_values() {
        assert!(RunConfig::parse("nonsense line\n").is_err());
        let cfg = RunConfig::parse("users = many\n").unwrap();
        assert!(cfg.get_usize("users", 1).is_err());
    }

    #[test]
    fn manifest_is_sorted_and_stable() {
        let mut cfg = RunConfig::parse("zeta = 1\nalpha = 2\n").unwrap();
        cfg.set("mid", "3".to_string());
        assert_eq!(cfg.manifest(), "alpha = 2\nmid = 3\nzeta = 1\n");
    }
}

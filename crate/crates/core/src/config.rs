//! Line-oriented `key = value` configuration files.
//!
//! Syntax: one assignment per line, `#` comments, blank lines ignored.
//! Values are untyped strings; typed getters parse on access and name the
//! offending key in every error. Callers validate the key set against a
//! whitelist so a misspelled key fails loudly instead of silently using a
//! default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text)
    }

    /// Overrides or inserts one entry (how CLI flags win over file values).
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Rejects any key outside `allowed`, naming the first offender.
    pub fn validate_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, ty: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key {key:?}: cannot parse {v:?} as {ty}"))
            }),
        }
    }

    pub fn get_f32(&self, key: &str) -> Result<Option<f32>> {
        self.parsed(key, "f32")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key, "usize")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key, "u64")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.entries.get(key).map(|s| s.as_str()) {
            None => Ok(None),
            Some("true") | Some("1") => Ok(Some(true)),
            Some("false") | Some("0") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("key {key:?}: cannot parse {v:?} as bool"))),
        }
    }

    pub fn f32_or(&self, key: &str, default: f32) -> Result<f32> {
        Ok(self.get_f32(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_usize(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.get_u64(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.get_bool(key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let cfg = Config::parse("# training\nlr = 2e-5\n\nsteps = 100\nname = run a\n").unwrap();
        assert_eq!(cfg.get_f32("lr").unwrap(), Some(2e-5));
        assert_eq!(cfg.get_usize("steps").unwrap(), Some(100));
        assert_eq!(cfg.get_str("name"), Some("run a"));
        assert_eq!(cfg.get_str("missing"), None);
    }

    #[test]
    fn errors_name_the_key() {
        let cfg = Config::parse("steps = many").unwrap();
        let err = cfg.get_usize("steps").unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");

        let err = cfg.validate_keys(&["lr"]).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("= 3").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn set_overrides_file_value() {
        let mut cfg = Config::parse("seed = 1").unwrap();
        cfg.set("seed", "7");
        assert_eq!(cfg.get_u64("seed").unwrap(), Some(7));
    }

    #[test]
    fn bool_values() {
        let cfg = Config::parse("a = true\nb = 0\nc = yes").unwrap();
        assert_eq!(cfg.get_bool("a").unwrap(), Some(true));
        assert_eq!(cfg.get_bool("b").unwrap(), Some(false));
        assert!(cfg.get_bool("c").is_err());
        assert_eq!(cfg.bool_or("d", true).unwrap(), true);
    }
}

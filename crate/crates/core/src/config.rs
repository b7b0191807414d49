//! Flat `key = value` configuration files.
//!
//! Lines starting with `#` are comments. A file may contain one
//! `include = path` line, resolved relative to the including file; keys in
//! the including file win over the included ones, and command-line overrides
//! win over both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `text`; `source` names the file for errors and include paths.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        Self::parse_at_depth(text, source, 0)
    }

    fn parse_at_depth(text: &str, source: &Path, depth: usize) -> Result<Self> {
        let mut own = BTreeMap::new();
        let mut include: Option<PathBuf> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if k == "include" {
                if include.is_some() {
                    return Err(err("only one include per file".into()));
                }
                let base = source.parent().unwrap_or_else(|| Path::new("."));
                include = Some(base.join(v));
                continue;
            }
            if own.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        let mut cfg = match include {
            Some(path) => {
                if depth >= MAX_INCLUDE_DEPTH {
                    return Err(Error::Config(format!(
                        "include depth exceeds {MAX_INCLUDE_DEPTH} at {}",
                        path.display()
                    )));
                }
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Self::parse_at_depth(&text, &path, depth + 1)?
            }
            None => KvConfig::new(),
        };
        cfg.entries.extend(own);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("override `{spec}` has an empty key")));
        }
        self.set(k, v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors on the first key not in `valid`, listing the valid keys.
    pub fn check_keys(&self, valid: &[&str]) -> Result<()> {
        if let Some(bad) = self.keys().find(|k| !valid.contains(k)) {
            return Err(Error::Config(format!(
                "unknown key `{bad}`; valid keys: {}",
                valid.join(", ")
            )));
        }
        Ok(())
    }

    /// Parses `key` with `FromStr`, falling back to `default` when absent.
    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "a = 1\nb = 2\n").unwrap();
        let main = dir.path().join("main.cfg");
        std::fs::write(&main, "# run\ninclude = base.cfg\nb = 3\n").unwrap();
        let mut c = KvConfig::load(&main).unwrap();
        assert_eq!(c.get("a"), Some("1"));
        assert_eq!(c.get("b"), Some("3"));
        c.apply_override("b=4").unwrap();
        assert_eq!(c.parse_or("b", 0u32).unwrap(), 4);
        assert_eq!(c.parse_or("missing", 9u32).unwrap(), 9);
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn errors_name_file_line_and_keys() {
        let p = Path::new("x.cfg");
        let e = KvConfig::parse("a = 1\njunk\n", p).unwrap_err().to_string();
        assert!(e.contains("x.cfg") && e.contains('2'), "{e}");
        assert!(KvConfig::parse("a = 1\na = 2\n", p).is_err());
        assert!(KvConfig::parse("include = a\ninclude = b\n", p).is_err());
        let c = KvConfig::parse("lr = 1\nlrr = 2\n", p).unwrap();
        let e = c.check_keys(&["lr", "seed"]).unwrap_err().to_string();
        assert!(e.contains("lrr") && e.contains("lr, seed"), "{e}");
        let e = c.parse_or("lr", true).unwrap_err().to_string();
        assert!(e.contains("lr"));
    }

    #[test]
    fn include_cycle_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loop.cfg");
        std::fs::write(&p, "include = loop.cfg\n").unwrap();
        assert!(KvConfig::load(&p).is_err());
    }
}

//! Flat `name = value` text files for constant bundles and certificates.
//!
//! Values are written with 17 significant digits so a file round-trips to the
//! same `f64`. Lines starting with `#` are comments; `inf` and `-inf` are valid
//! values.

use std::fmt::Write as _;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    pub comments: Vec<String>,
    pub entries: Vec<(String, f64)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: impl Into<String>) {
        self.comments.push(text.into());
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: f64) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn require(&self, key: &str) -> Result<f64> {
        self.get(key)
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key `{key}`") })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            let _ = writeln!(out, "# {c}");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {}", format_value(*v));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut file = KvFile::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                file.comments.push(c.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `name = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || key.chars().any(char::is_whitespace) {
                return Err(Error::Parse { line: i + 1, msg: format!("bad key `{key}`") });
            }
            let value: f64 = value.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("`{}` is not a number", value.trim()),
            })?;
            if file.get(key).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key `{key}`") });
            }
            file.entries.push((key.to_string(), value));
        }
        Ok(file)
    }
}

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut f = KvFile::new();
        f.comment("constants");
        f.set("a1", 0.1 + 0.2);
        f.set("beta", f64::INFINITY);
        f.set("tiny", -1.234_567_890_123_456_7e-300);
        let back = KvFile::parse(&f.render()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get("a1"), Some(0.1 + 0.2));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(KvFile::parse("a = 1\nb 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KvFile::parse("a = x"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(KvFile::parse("a = 1\na = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(KvFile::parse("# only a comment\n\n").unwrap().entries.is_empty());
    }
}

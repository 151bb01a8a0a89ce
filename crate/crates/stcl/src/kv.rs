//! Flat `key = value` text files. Blank lines and lines starting with `#`
//! are ignored; keys keep their file order.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{read_file, write_file, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` over this map.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key `{}`", key)))
    }

    /// Parses `key` when present.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{}`: cannot parse `{}`: {}", key, v, e))),
        }
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{}`", key)))
    }

    /// Whitespace-separated list of numbers.
    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Config(format!("key `{}`: bad number `{}`: {}", key, t, e)))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut map = KvMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(format!("line {}: empty key", n + 1));
            }
            if map.contains(k) {
                return Err(format!("line {}: duplicate key `{}`", n + 1, k));
            }
            map.set(k, v.trim());
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    /// Fails on any key outside `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown key `{}`", k)));
            }
        }
        Ok(())
    }
}

/// Shortest decimal form that reads back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{:?}", v)
}

pub fn fmt_floats(vs: &[f64]) -> String {
    vs.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_order() {
        let mut m = KvMap::new();
        m.set("zeta", 1);
        m.set("alpha", "two words");
        m.set("zeta", 3);
        let back = KvMap::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.keys().collect::<Vec<_>>(), ["zeta", "alpha"]);
    }

    #[test]
    fn comments_and_errors() {
        let m = KvMap::from_text("# c\n\n a = 1 \nb=x=y\n").unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("x=y"));
        assert!(KvMap::from_text("novalue\n").is_err());
        assert!(KvMap::from_text("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn float_formatting_is_exact() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}

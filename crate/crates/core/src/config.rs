//! Plain-text `key = value` configuration files.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; trailing `# ...` comments are stripped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

pub fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{raw}` for `{key}`"))),
    }
}

/// A config section that recognizes some keys.
pub trait Section {
    /// Apply one entry; `Ok(false)` if the key belongs elsewhere.
    fn set(&mut self, key: &str, raw: &str) -> Result<bool>;
    /// Entries that reproduce this section.
    fn entries(&self) -> Vec<(String, String)>;
}

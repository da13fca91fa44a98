use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use speq::C64;

use crate::{CliError, CliResult};

/// Keys accepted by every subcommand.
pub const GLOBAL_KEYS: &[&str] = &["seed", "out", "threads"];

/// Flag values merged with a config file; the file wins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    allowed: Vec<&'static str>,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(keys: &[&'static str]) -> Self {
        let mut allowed = GLOBAL_KEYS.to_vec();
        allowed.extend_from_slice(keys);
        Self {
            allowed,
            values: BTreeMap::new(),
        }
    }

    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(self.allowed.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn apply_config(&mut self, text: &str) -> CliResult<()> {
        for (key, value) in speq::sim::parse_key_values(text)? {
            if !self.allowed.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown key {key:?}, expected one of {}",
                    self.allowed.join(", ")
                )));
            }
            self.values.insert(key, value);
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_config(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T> {
        self.get(key)?
            .ok_or_else(|| CliError::Config(format!("missing required value {key:?}")))
    }

    /// Pairs in the flat format understood by the library config parsers.
    pub fn to_key_values(&self, skip: &[&str]) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Accepts `a`, `a+bi`, `a-bi`, `bi` and `a,b`.
pub fn parse_complex(s: &str) -> CliResult<C64> {
    let bad = || CliError::Config(format!("cannot parse complex number {s:?}"));
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if t.is_empty() {
        return Err(bad());
    }
    let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
    if let Some((re, im)) = t.split_once(',') {
        return Ok(C64::new(num(re)?, num(im)?));
    }
    let Some(body) = t.strip_suffix('i') else {
        return Ok(C64::new(num(&t)?, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| matches!(bytes[k], b'+' | b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let imag = |v: &str| match v {
        "" | "+" => Ok(1.0),
        "-" => Ok(-1.0),
        _ => num(v),
    };
    match split {
        Some(k) => Ok(C64::new(num(&body[..k])?, imag(&body[k..])?)),
        None => Ok(C64::new(0.0, imag(body)?)),
    }
}

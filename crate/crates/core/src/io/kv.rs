//! Plain `key=value` config files: one pair per line, `#` comments, blank
//! lines ignored.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse_file(path: &Path) -> Result<KvMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_str(&text, &path.display().to_string())
}

pub fn parse_str(text: &str, origin: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(origin, format!("line {}: expected key=value", lineno + 1)));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn get_f64(map: &KvMap, key: &str, origin: &Path) -> Result<f64> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::parse(origin.display().to_string(), format!("missing key {key}")))?;
    raw.parse().map_err(|_| {
        Error::parse(origin.display().to_string(), format!("key {key}: bad float {raw:?}"))
    })
}

pub fn get_usize(map: &KvMap, key: &str, origin: &Path) -> Result<usize> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::parse(origin.display().to_string(), format!("missing key {key}")))?;
    raw.parse().map_err(|_| {
        Error::parse(origin.display().to_string(), format!("key {key}: bad integer {raw:?}"))
    })
}

pub fn get_f64_or(map: &KvMap, key: &str, default: f64, origin: &Path) -> Result<f64> {
    if map.contains_key(key) {
        get_f64(map, key, origin)
    } else {
        Ok(default)
    }
}

pub fn get_usize_or(map: &KvMap, key: &str, default: usize, origin: &Path) -> Result<usize> {
    if map.contains_key(key) {
        get_usize(map, key, origin)
    } else {
        Ok(default)
    }
}

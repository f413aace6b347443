//! Flat key-value configuration: `key = value` lines, `#` comments, no
//! nesting. Consumers read typed values through [`ConfigReader`], which
//! records every key it touches so leftovers (typos) become hard errors.

use super::IoError;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Parses config text into an ordered map. Later lines win on duplicate
/// keys, and command-line overrides are applied the same way.
pub fn parse_config_text(text: &str, path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(IoError::parse(
                path,
                lineno,
                format!("expected `key = value`, got {line:?}"),
            ));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(IoError::parse(path, lineno, "empty key"));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    parse_config_text(&std::fs::read_to_string(path)?, path)
}

/// Applies `key=value` override strings (e.g. from `--set`) onto a map.
pub fn apply_overrides(
    map: &mut BTreeMap<String, String>,
    overrides: &[String],
) -> Result<(), IoError> {
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(IoError::Format(format!(
                "override {item:?} is not of the form key=value"
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

/// Typed access to a config map with used-key tracking. Call
/// [`ConfigReader::finish`] after reading everything; unknown keys are a
/// hard error so typos cannot silently fall back to defaults.
pub struct ConfigReader {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigReader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        ConfigReader {
            map,
            used: BTreeSet::new(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or_else(|| default.to_string())
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| IoError::Format(format!("config key {key}: bad number {v:?}"))),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| IoError::Format(format!("config key {key}: bad integer {v:?}"))),
        }
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| IoError::Format(format!("config key {key}: bad integer {v:?}"))),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(IoError::Format(format!(
                    "config key {key}: bad boolean {v:?}"
                ))),
            },
        }
    }

    /// Three whitespace-separated floats, e.g. `background = 1.0 1.0 1.0`.
    pub fn get_vec3(&mut self, key: &str, default: [f64; 3]) -> Result<[f64; 3], IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(IoError::Format(format!(
                        "config key {key}: expected 3 numbers, got {v:?}"
                    )));
                }
                let mut out = [0.0; 3];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p.parse().map_err(|_| {
                        IoError::Format(format!("config key {key}: bad number {p:?}"))
                    })?;
                }
                Ok(out)
            }
        }
    }

    /// The effective configuration: every recognized key with the value in
    /// force (explicit or default callers should have echoed via `get_*`).
    pub fn effective(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    /// Errors if the map holds keys nothing ever read.
    pub fn finish(self) -> Result<BTreeMap<String, String>, IoError> {
        let unknown: Vec<String> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(self.map)
        } else {
            Err(IoError::UnknownKeys(unknown.join(", ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blank_lines_and_overrides() {
        let text = "\n# a comment\nseed = 7\nnear = 0.5   # trailing comment\nname = orbiter run\n";
        let mut map = parse_config_text(text, Path::new("cfg")).unwrap();
        assert_eq!(map["seed"], "7");
        assert_eq!(map["near"], "0.5");
        assert_eq!(map["name"], "orbiter run");
        apply_overrides(&mut map, &["seed=9".to_string()]).unwrap();
        assert_eq!(map["seed"], "9");
    }

    #[test]
    fn typed_getters_and_defaults() {
        let text = "a = 1.5\nb = 3\nflag = true\nbg = 0.1 0.2 0.3\n";
        let map = parse_config_text(text, Path::new("cfg")).unwrap();
        let mut r = ConfigReader::new(map);
        assert_eq!(r.get_f64("a", 0.0).unwrap(), 1.5);
        assert_eq!(r.get_usize("b", 0).unwrap(), 3);
        assert!(r.get_bool("flag", false).unwrap());
        assert_eq!(r.get_vec3("bg", [0.0; 3]).unwrap(), [0.1, 0.2, 0.3]);
        assert_eq!(r.get_f64("missing", 2.5).unwrap(), 2.5);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_a_hard_error() {
        let map = parse_config_text("tyop = 1\nseed = 2\n", Path::new("cfg")).unwrap();
        let mut r = ConfigReader::new(map);
        let _ = r.get_u64("seed", 0).unwrap();
        let err = r.finish().unwrap_err();
        assert!(matches!(&err, IoError::UnknownKeys(k) if k.contains("tyop")));
    }

    #[test]
    fn malformed_lines_name_the_location() {
        let err = parse_config_text("novalue\n", Path::new("my.cfg")).unwrap_err();
        assert!(err.to_string().contains("my.cfg:1"));
    }
}

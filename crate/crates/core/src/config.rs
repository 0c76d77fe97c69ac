//! INI-style settings with dotted keys.
//!
//! `[section]` headers prefix the keys below them, so `hop_size = 128` under
//! `[extractor.stft]` is addressed as `extractor.stft.hop_size`. Readers take
//! keys out as they consume them; anything left over is reported as unknown.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, ParseOption};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| CoreError::Config(format!("line {}: {}", e.line, e.msg)))?;
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let key = key.trim();
                if key.is_empty() {
                    return config_err("empty key");
                }
                let full = match section.map(str::trim).filter(|s| !s.is_empty()) {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                if map.insert(full.clone(), value.trim().to_string()).is_some() {
                    return config_err(format!("duplicate key {full}"));
                }
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ini()).map_err(|e| CoreError::io(path, e))
    }

    /// Renders with one section per leading key segment.
    pub fn to_ini(&self) -> String {
        let mut sections: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
        for (k, v) in &self.map {
            let (sec, leaf) = k.split_once('.').unwrap_or(("", k));
            sections.entry(sec).or_default().push((leaf, v));
        }
        let mut out = String::new();
        for (sec, entries) in sections {
            if !sec.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.map.keys().any(|k| k.starts_with(&p))
    }

    /// Removes `key` and, if present, parses it into `slot`.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.map.remove(key) {
            *slot = raw
                .parse()
                .map_err(|e| CoreError::Config(format!("{key} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn take_with<T>(&mut self, key: &str, slot: &mut T, parse: impl FnOnce(&str) -> Option<T>) -> Result<()> {
        if let Some(raw) = self.map.remove(key) {
            *slot = parse(&raw).ok_or_else(|| CoreError::Config(format!("{key} = {raw:?} is not recognized")))?;
        }
        Ok(())
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Fails on any key no reader consumed.
    pub fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(_) => config_err(format!(
                "unknown key(s): {}",
                self.map.keys().cloned().collect::<Vec<_>>().join(", ")
            )),
        }
    }

    pub fn merge(&mut self, other: Settings) {
        self.map.extend(other.map);
    }
}

impl FromStr for Settings {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// A settings group addressable under a dotted prefix.
pub trait Configurable {
    /// Overwrites fields whose keys are present, consuming them.
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()>;
    fn write_settings(&self, s: &mut Settings, prefix: &str);
}

pub fn key(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Text manifest stored next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

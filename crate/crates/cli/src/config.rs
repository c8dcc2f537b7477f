//! `key = value` configuration files. Command-line flags win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in a config file, spelled like the long flags.
pub const KNOWN_KEYS: &[&str] = &[
    "data-dir",
    "profiles",
    "weights",
    "embeddings",
    "vocab",
    "source-layer",
    "out",
    "k",
    "precursors",
    "clusters",
    "min-cluster",
    "method",
    "seed",
    "workers",
    "sequential",
    "paper-compare",
    "llm-endpoint",
    "llm-model",
    "llm-cache",
    "llm-timeout-secs",
    "vocab-size",
    "layer0-size",
    "layer1-size",
    "embedding-dim",
    "precursor-fanin",
    "phasing-strength",
    "attention-contrast",
    "priming-sharpness",
    "noise-scale",
    "activation-noise",
    "phasing-noise",
    "group-size",
    "groups-per-neuron",
    "profile-size",
    "bundle",
    "bind",
    "cors-origin",
    "static-dir",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Blank lines and `#` comments are ignored; `_` and `-` are
    /// interchangeable in keys.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value", n + 1));
            };
            let key = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key {key:?}", n + 1));
            }
            let value = v.trim().trim_matches('"').to_string();
            if values.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key {key:?}", n + 1));
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// `flag` if given, else the parsed config value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Validation(format!("config key {key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn flag(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}

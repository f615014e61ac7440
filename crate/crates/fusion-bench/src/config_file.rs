//! Simple key=value config files. Flags always win over file values,
//! which win over defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Parsed key=value pairs. Keys are trimmed and case-sensitive; `#`
/// starts a comment; blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "config line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("config key {key}: bad value {raw:?}: {e}"))
            }),
        }
    }

    /// Train settings with file values layered over `base`.
    pub fn apply_train(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.parsed("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = self.parsed("lr_decay")? {
            cfg.lr_decay = v;
        }
        if let Some(v) = self.parsed("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.parsed("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.parsed("dropout_p")? {
            cfg.dropout_p = v;
        }
        if let Some(v) = self.parsed("l2_weight")? {
            cfg.l2_weight = v;
        }
        if let Some(v) = self.parsed("n_runs")? {
            cfg.n_runs = v;
        }
        if let Some(v) = self.parsed("base_seed")? {
            cfg.base_seed = v;
        }
        Ok(cfg)
    }

    /// Model settings with file values layered over `base`.
    pub fn apply_model(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.parsed("d_model")? {
            cfg.d_model = v;
        }
        if let Some(v) = self.parsed("n_heads")? {
            cfg.n_heads = v;
        }
        Ok(cfg)
    }

    /// Reject keys this tool does not understand so typos surface.
    pub fn check_known_keys(&self) -> Result<()> {
        const KNOWN: [&str; 10] = [
            "lr",
            "lr_decay",
            "epochs",
            "batch_size",
            "dropout_p",
            "l2_weight",
            "n_runs",
            "base_seed",
            "d_model",
            "n_heads",
        ];
        for key in self.keys() {
            if !KNOWN.contains(&key) {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; known keys: {}",
                    KNOWN.join(", ")
                )));
            }
        }
        Ok(())
    }
}

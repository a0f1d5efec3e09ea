//! Run configuration: a flat map of dotted keys merged from a config file,
//! the environment and command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every recognised key with its default (empty means unset).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "0"),
    ("out", ""),
    ("fid.model", "random-projection"),
    ("synth.n_plants", "120"),
    ("synth.stages", "6"),
    ("synth.image_size", "64"),
    ("synth.harvest_prob", "0.1"),
    ("pair.records", ""),
    ("pair.horizon", "3"),
    ("pair.threshold", "0.02"),
    ("pair.visibility", ""),
    ("train.pairs", ""),
    ("train.data_root", ""),
    ("train.profile", "synthetic"),
    ("train.epochs", ""),
    ("train.learning_rate", ""),
    ("train.lambda_l1", ""),
    ("train.batch_size", ""),
    ("train.checkpoint_interval", "0"),
    ("predict.model", ""),
    ("predict.pairs", ""),
    ("predict.data_root", ""),
    ("predict.split", "test"),
    ("predict.images", ""),
    ("predict.stochastic", "true"),
    ("segment.images", ""),
    ("segment.records", ""),
    ("segment.backend", "baseline"),
    ("segment.program", ""),
    ("segment.args", ""),
    ("segment.min_area", "50"),
    ("evaluate.generated", ""),
    ("evaluate.reference_test", ""),
    ("evaluate.reference_train", ""),
    ("report.reference_traits", ""),
    ("report.generated_traits", ""),
    ("report.fid", ""),
    ("report.image_size", "64"),
    ("report.center_fraction", "0.3333333333333333"),
];

/// Environment variables and the keys they set.
pub const ENV_KEYS: &[(&str, &str)] = &[
    ("GROWTHCAST_SEED", "seed"),
    ("GROWTHCAST_FID_MODEL", "fid.model"),
];

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{origin}:{}: expected key=value, got `{line}`", i + 1))
        })?;
        let k = k.trim();
        if !known(k) {
            return Err(CliError::Config(format!("{origin}:{}: unknown key `{k}`", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    /// Merges defaults < file < environment < flags.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: &BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            values.extend(parse_config_text(&text, &path.display().to_string())?);
        }
        for (var, key) in ENV_KEYS {
            if let Some(v) = env(var) {
                values.insert(key.to_string(), v);
            }
        }
        for (k, v) in flags {
            if !known(k) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        let config = RunConfig { values };
        config.get::<u64>("seed")?;
        config.get::<usize>("workers")?;
        Ok(config)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("`{key}={raw}`: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key).map(PathBuf::from)
    }

    /// Set keys as sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

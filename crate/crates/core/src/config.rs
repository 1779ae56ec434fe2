//! Flat `key = value` experiment files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors, so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::aggregation::InputScaling;
use crate::data::TaskKind;
use crate::protocol::FedConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}` appears twice")]
    DuplicateKey { key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

impl ConfigError {
    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Syntax { .. } => None,
            ConfigError::UnknownKey(k) | ConfigError::MissingKey(k) => Some(k),
            ConfigError::DuplicateKey { key } | ConfigError::InvalidValue { key, .. } => Some(key),
        }
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "test_dataset",
    "task",
    "num_clients",
    "rounds",
    "local_epochs",
    "batch_size",
    "alpha",
    "beta1",
    "beta2",
    "epsilon",
    "channels",
    "total_trees",
    "max_depth",
    "eta",
    "lambda",
    "gamma",
    "min_child_weight",
    "base_score",
    "seed",
    "test_fraction",
    "head_variant",
    "scale_inputs_by_eta",
    "repeats",
    "dimension",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Held-out file; without one, `test_fraction` of `dataset` is split off.
    pub test_dataset: Option<PathBuf>,
    pub test_fraction: f64,
    pub repeats: usize,
    /// Feature count to assume when the files may not mention the last one.
    pub dimension: Option<usize>,
    pub fed: FedConfig,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::InvalidValue { key: key.into(), message: e.to_string() })
}

fn parse_bool(key: &str, raw: &str) -> Result<bool, ConfigError> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::InvalidValue { key: key.into(), message: format!("`{raw}` is not a boolean") }),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey { key: k.into() });
            }
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let required = |k: &str| map.get(k).ok_or_else(|| ConfigError::MissingKey(k.into()));
        let task: TaskKind = parse_value("task", required("task")?)?;
        let dataset = PathBuf::from(required("dataset")?);
        let num_clients: usize = map.get("num_clients").map_or(Ok(2), |v| parse_value("num_clients", v))?;
        let total_trees: usize = map.get("total_trees").map_or(Ok(500), |v| parse_value("total_trees", v))?;
        if num_clients == 0 {
            return Err(invalid("num_clients", "must be at least 1"));
        }
        if total_trees == 0 || total_trees % num_clients != 0 {
            return Err(invalid("total_trees", "must be a positive multiple of num_clients"));
        }

        let mut fed = FedConfig::with_total_trees(task, num_clients, total_trees);
        let mut test_fraction = 0.2;
        let mut repeats = 1;
        let mut dimension = None;
        let mut test_dataset = None;
        for (k, v) in map {
            let k = k.as_str();
            match k {
                "dataset" | "task" | "num_clients" | "total_trees" => {}
                "test_dataset" => test_dataset = Some(PathBuf::from(v)),
                "rounds" => fed.rounds = parse_value(k, v)?,
                "local_epochs" => fed.train.local_epochs = parse_value(k, v)?,
                "batch_size" => fed.train.batch_size = parse_value(k, v)?,
                "alpha" => fed.adam.alpha = parse_value(k, v)?,
                "beta1" => fed.adam.beta1 = parse_value(k, v)?,
                "beta2" => fed.adam.beta2 = parse_value(k, v)?,
                "epsilon" => fed.adam.epsilon = parse_value(k, v)?,
                "channels" => fed.channels = parse_value(k, v)?,
                "max_depth" => fed.gbdt.max_depth = parse_value(k, v)?,
                "eta" => fed.gbdt.eta = parse_value(k, v)?,
                "lambda" => fed.gbdt.lambda = parse_value(k, v)?,
                "gamma" => fed.gbdt.gamma = parse_value(k, v)?,
                "min_child_weight" => fed.gbdt.min_child_weight = parse_value(k, v)?,
                "base_score" => fed.gbdt.base_score = parse_value(k, v)?,
                "seed" => fed.seed = parse_value(k, v)?,
                "test_fraction" => test_fraction = parse_value(k, v)?,
                "head_variant" => fed.head_variant = parse_value(k, v)?,
                "scale_inputs_by_eta" => {
                    fed.input_scaling = if parse_bool(k, v)? { InputScaling::ByEta } else { InputScaling::Raw }
                }
                "repeats" => repeats = parse_value(k, v)?,
                "dimension" => dimension = Some(parse_value(k, v)?),
                _ => unreachable!("key list checked during parsing"),
            }
        }

        let positive = [
            ("rounds", fed.rounds),
            ("local_epochs", fed.train.local_epochs),
            ("batch_size", fed.train.batch_size),
            ("channels", fed.channels),
            ("max_depth", fed.gbdt.max_depth),
            ("repeats", repeats),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, "must be at least 1"));
            }
        }
        if !(fed.adam.alpha > 0.0) {
            return Err(invalid("alpha", "must be positive"));
        }
        if !(fed.adam.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        for (k, b) in [("beta1", fed.adam.beta1), ("beta2", fed.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(k, "must lie in [0, 1)"));
            }
        }
        if !(fed.gbdt.eta > 0.0) || !fed.gbdt.eta.is_finite() {
            return Err(invalid("eta", "must be positive"));
        }
        if !(fed.gbdt.lambda >= 0.0) {
            return Err(invalid("lambda", "must be non-negative"));
        }
        if !(fed.gbdt.gamma >= 0.0) {
            return Err(invalid("gamma", "must be non-negative"));
        }
        if !(fed.gbdt.min_child_weight >= 0.0) {
            return Err(invalid("min_child_weight", "must be non-negative"));
        }
        if !fed.gbdt.base_score.is_finite() {
            return Err(invalid("base_score", "must be finite"));
        }
        if test_dataset.is_none() && !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(invalid("test_fraction", "must lie in (0, 1)"));
        }
        Ok(Self { dataset, test_dataset, test_fraction, repeats, dimension, fed })
    }
}

fn invalid(key: &str, message: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), message: message.into() }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

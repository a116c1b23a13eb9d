//! Run configuration: TOML file with dotted keys, layered as
//! defaults < file < command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::{AugmentationConfig, NormalizationStats};
use crate::metrics::{Aggregation, MetricOptions};
use crate::model::{ArchConfig, DEFAULT_THRESHOLD};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `images/` and `masks/`.
    pub root: PathBuf,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub normalization: NormalizationStats,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/Kvasir-SEG"),
            train_fraction: 0.8,
            split_seed: 0,
            normalization: NormalizationStats::IMAGENET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probability cut-off; a pixel is foreground when strictly above it.
    pub threshold: f32,
    pub aggregation: Aggregation,
    pub smoothing: f64,
    /// Overlap score for images where prediction and ground truth are both empty.
    pub both_empty_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let m = MetricOptions::default();
        Self {
            threshold: DEFAULT_THRESHOLD,
            aggregation: m.aggregation,
            smoothing: m.smoothing,
            both_empty_score: m.both_empty_score,
        }
    }
}

impl EvalConfig {
    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            aggregation: self.aggregation,
            smoothing: self.smoothing,
            both_empty_score: self.both_empty_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parent directory of timestamped run directories.
    pub output_dir: PathBuf,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>().map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    })
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string (so `data.root=some/dir` needs no quoting).
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::Invalid(format!("`{key}`: `{part}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Command-line layer on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Sets every seed: training, augmentation and split.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// `key=value` pairs with dotted keys, applied last.
    pub set: Vec<String>,
}

impl Overrides {
    fn apply(&self, table: &mut Table) -> Result<(), ConfigError> {
        if let Some(seed) = self.seed {
            let seed =
                i64::try_from(seed).map_err(|_| ConfigError::Invalid(format!("seed {seed} exceeds {}", i64::MAX)))?;
            for key in ["train.seed", "augment.seed", "data.split_seed"] {
                set_path(table, key, Value::Integer(seed))?;
            }
        }
        if let Some(dir) = &self.output_dir {
            set_path(table, "output_dir", Value::String(dir.display().to_string()))?;
        }
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(item.clone()))?;
            set_path(table, key.trim(), parse_value(raw.trim()))?;
        }
        Ok(())
    }
}

impl RunConfig {
    fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serialises to TOML") {
            Value::Table(t) => t,
            _ => unreachable!("struct serialises to a table"),
        }
    }

    fn from_table(table: Table, origin: &str) -> Result<Self, ConfigError> {
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: origin.to_string(),
                message: e.to_string(),
            })
    }

    /// Parse a config document; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::layered(Some((text, "<string>")), &Overrides::default())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::resolve(Some(path), &Overrides::default())
    }

    /// Defaults, then `path` (if any), then `overrides`; the result is validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = path
            .map(|p| {
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })
            })
            .transpose()?;
        let origin = path.map(|p| p.display().to_string());
        Self::layered(text.as_deref().zip(origin.as_deref()), overrides)
    }

    fn layered(file: Option<(&str, &str)>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut table = Self::default().to_table();
        let mut origin = "<defaults>";
        if let Some((text, name)) = file {
            merge(&mut table, parse_table(text, name)?);
            origin = name;
        }
        overrides.apply(&mut table)?;
        let config = Self::from_table(table, origin)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.augment.validate().map_err(|e| invalid(&e))?;
        self.data.normalization.validate().map_err(|e| invalid(&e))?;
        if self.augment.target_size != self.model.input_size {
            return Err(ConfigError::Invalid(format!(
                "augment.target_size {:?} must equal model.input_size {:?}",
                self.augment.target_size, self.model.input_size
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "eval.threshold must lie in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        if self.eval.smoothing.is_nan()
            || self.eval.smoothing < 0.0
            || !(0.0..=1.0).contains(&self.eval.both_empty_score)
        {
            return Err(ConfigError::Invalid(
                "eval.smoothing must be non-negative and eval.both_empty_score within [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Fully resolved configuration as sorted `dotted.key = value` lines.
    /// The result is valid TOML and loads back to an equal config.
    pub fn snapshot(&self) -> String {
        fn walk(prefix: &str, table: &Table, out: &mut Vec<String>) {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match v {
                    Value::Table(t) => walk(&key, t, out),
                    other => out.push(format!("{key} = {other}")),
                }
            }
        }
        let mut lines = Vec::new();
        walk("", &self.to_table(), &mut lines);
        lines.sort();
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

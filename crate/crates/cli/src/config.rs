//! Run configuration: a TOML file with one table per component, plus
//! `key.path=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use brca::lstm::LstmConfig;
use brca::{BrcaConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Paragraphs longer than this are truncated on load.
    pub cap: usize,
    /// Keep only the first `limit` paragraphs no longer than `cap` (0 keeps all).
    pub limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/english.train.txt".into(),
            test: "data/english.test.txt".into(),
            cap: 1024,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sample_count: usize,
    pub seed: u64,
    pub bin_width: usize,
    pub p_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { sample_count: 10_000, seed: 1, bin_width: 64, p_grid: brca::eval::default_p_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub depths: Vec<usize>,
    /// Padded length of the static control model.
    pub static_length: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { depths: vec![2, 4, 8, 16], static_length: 1024 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: BrcaConfig,
    pub lstm: LstmConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| format!("config {}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = Value::Table(root).try_into().map_err(|e| format!("config: {e}"))?;
        cfg.model.validate().map_err(|e| format!("model config: {e}"))?;
        cfg.train.validate().map_err(|e| format!("train config: {e}"))?;
        cfg.lstm.validate().map_err(|e| format!("lstm config: {e}"))?;
        if cfg.eval.sample_count == 0 || cfg.eval.bin_width == 0 || cfg.data.cap == 0 {
            return Err("eval.sample_count, eval.bin_width and data.cap must be positive".into());
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

/// Sets `a.b.c = value`, creating intermediate tables. The value is read as
/// a TOML literal when it parses as one, otherwise as a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override {spec:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override {spec:?} has an empty key segment"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| format!("override {spec:?}: {p} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

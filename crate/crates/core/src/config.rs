//! Run configuration: one TOML file with `data`, `model`, `train` and `eval`
//! sections, plus `section.key=value` overrides that win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_GRID;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Clip count `T` after downsampling.
    pub num_clips: usize,
    /// Words seen fewer times than this in training make a sample rare.
    pub rare_threshold: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { num_clips: 200, rare_threshold: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Predictions kept per sample.
    pub top_n: usize,
    /// `(n, m)` cells of the recall grid.
    pub grid: Vec<(usize, f64)>,
    /// Count IoU equal to `m` as a hit.
    pub inclusive_iou: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { top_n: 5, grid: DEFAULT_GRID.to_vec(), inclusive_iou: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Desk-scale defaults used by the synthetic experiment.
    pub fn desk() -> Self {
        Self {
            data: DataSection { num_clips: 32, ..DataSection::default() },
            model: ModelConfig { d_model: 16, heads: 2, d_ff: 32, word_dim: 16, max_query_len: 4, d_hidden: 16, ..ModelConfig::default() },
            train: TrainConfig { epochs: 30, lr: 1e-3, ..TrainConfig::default() },
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_value(toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let cfg: Self = v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.num_clips == 0 || self.eval.top_n == 0 {
            return Err(Error::Config("num_clips and top_n must be positive".into()));
        }
        Ok(())
    }

    /// File values over `base`, then overrides in order.
    pub fn load(base: Self, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg: Self = layered(&base, file, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Deserializes `base` with the keys of `file` and then each `key=value`
/// override laid over it. Works for any config struct.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut v = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file_v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut v, file_v);
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = parse_literal(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("{path}: {k} is not a section")))?;
        if i + 1 == keys.len() {
            table.insert(k.to_string(), value);
            return Ok(());
        }
        cur = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

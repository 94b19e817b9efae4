use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::corpus::Corpus;
use super::pretrain::PretrainConfig;
use crate::error::{Error, Result};
use crate::minimax::RunConfig;
use crate::model::ModelConfig;

/// Where data comes from and where artifacts go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dense checkpoint read by `prune`/`eval` and written by `pretrain`.
    pub teacher: PathBuf,
    /// UTF-8 text file; the built-in synthetic corpus when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub corpus_seed: u64,
    pub eval_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            teacher: "teacher.json".into(),
            corpus: None,
            synthetic_bytes: 200_000,
            corpus_seed: 0,
            eval_fraction: 0.1,
            out_dir: "out".into(),
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => Corpus::load(p, self.eval_fraction),
            None => Corpus::synthetic(self.synthetic_bytes, self.corpus_seed, self.eval_fraction),
        }
    }
}

const PRETRAIN_PREFIX: &str = "pretrain_";

/// Every tunable knob in one flat key space. Model, run and data keys are
/// used as-is; pretraining keys carry a `pretrain_` prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    /// Model keys given explicitly (by file or override).
    pub model_keys: BTreeSet<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Model,
    Run,
    Pretrain,
    Data,
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => Err(Error::Config("expected a table".into())),
        Err(e) => Err(Error::Config(e.to_string())),
    }
}

fn from_table<T: DeserializeOwned>(t: Table) -> Result<T> {
    Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Data keys, including optional ones that serialise to nothing when unset.
fn data_keys() -> Vec<String> {
    keys_of(&DataConfig {
        corpus: Some(PathBuf::new()),
        ..DataConfig::default()
    })
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string (so `teacher=runs/t.json` needs no quotes).
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    fn section(key: &str) -> Result<(Section, String)> {
        let d = ExperimentConfig::default();
        if let Some(rest) = key.strip_prefix(PRETRAIN_PREFIX) {
            if keys_of(&d.pretrain).iter().any(|k| k == rest) {
                return Ok((Section::Pretrain, rest.to_string()));
            }
        }
        let sections = [
            (Section::Model, keys_of(&d.model)),
            (Section::Run, keys_of(&d.run)),
            (Section::Data, data_keys()),
        ];
        for (sec, keys) in sections {
            if keys.iter().any(|k| k == key) {
                return Ok((sec, key.to_string()));
            }
        }
        Err(Error::Config(format!("unknown config key `{key}`")))
    }

    /// Builds a config from a flat table; unknown keys are errors.
    pub fn from_flat(flat: Table) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(flat)?;
        Ok(cfg)
    }

    /// Overwrites the given keys.
    pub fn apply(&mut self, flat: Table) -> Result<()> {
        let mut model = to_table(&self.model)?;
        let mut run = to_table(&self.run)?;
        let mut pre = to_table(&self.pretrain)?;
        let mut data = to_table(&self.data)?;
        for (key, value) in flat {
            let (sec, k) = Self::section(&key)?;
            match sec {
                Section::Model => {
                    self.model_keys.insert(k.clone());
                    model.insert(k, value)
                }
                Section::Run => run.insert(k, value),
                Section::Pretrain => pre.insert(k, value),
                Section::Data => data.insert(k, value),
            };
        }
        let wrap = |e: Error, what: &str| match e {
            Error::Config(m) => Error::Config(format!("{what} settings: {m}")),
            other => other,
        };
        self.model = from_table(model).map_err(|e| wrap(e, "model"))?;
        self.run = from_table(run).map_err(|e| wrap(e, "run"))?;
        self.pretrain = from_table(pre).map_err(|e| wrap(e, "pretrain"))?;
        self.data = from_table(data).map_err(|e| wrap(e, "data"))?;
        Ok(())
    }

    /// Applies `key=value` strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut flat = Table::new();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            flat.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        self.apply(flat)
    }

    /// Reads a `.json` or `.toml` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let flat: Table = if path.extension().is_some_and(|e| e == "json") {
            let json: serde_json::Value = serde_json::from_str(&text)?;
            match Value::try_from(json) {
                Ok(Value::Table(t)) => t,
                _ => {
                    return Err(Error::Config(format!(
                        "{} is not a flat JSON object",
                        path.display()
                    )))
                }
            }
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        };
        Self::from_flat(flat)
    }

    /// The full flat key space with current values.
    pub fn to_flat(&self) -> Result<Table> {
        let mut out = to_table(&self.model)?;
        out.extend(to_table(&self.run)?);
        out.extend(to_table(&self.data)?);
        for (k, v) in to_table(&self.pretrain)? {
            out.insert(format!("{PRETRAIN_PREFIX}{k}"), v);
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_flat()?).map_err(|e| Error::Config(e.to_string()))
    }
}

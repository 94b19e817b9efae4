use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::lora::LoraSet;
use super::masks::MaskSet;
use super::params::ModelParams;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::sparsity::SparsityState;

pub const CHECKPOINT_FORMAT: &str = "maskprune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON container: config, named tensors and optional
/// training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityState>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            tensors: params.to_map(),
            masks: None,
            lora: None,
            sparsity: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_map(&self.config, self.tensors.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "not a checkpoint: format tag `{}`",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        if let Some(m) = &self.masks {
            m.validate(&self.config)?;
        }
        if let Some(l) = &self.lora {
            l.validate(&self.config)?;
        }
        if let Some(s) = &self.sparsity {
            s.validate(&self.config)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.validate()?;
        ck.params()?;
        Ok(ck)
    }
}

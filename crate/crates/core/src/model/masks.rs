use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::layer_key;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Which structural unit a mask entry gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// One attention head.
    Head,
    /// One FFN intermediate channel.
    Inter,
}

impl UnitKind {
    pub const BOTH: [UnitKind; 2] = [UnitKind::Head, UnitKind::Inter];

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Head => "head",
            UnitKind::Inter => "inter",
        }
    }

    /// Number of units of this kind in one layer.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            UnitKind::Head => cfg.n_heads,
            UnitKind::Inter => cfg.d_ffn,
        }
    }

    /// Prunable parameters removed with one unit of this kind.
    pub fn cost(self, cfg: &ModelConfig) -> usize {
        match self {
            UnitKind::Head => cfg.head_cost(),
            UnitKind::Inter => cfg.channel_cost(),
        }
    }

    /// Graph placeholder name of this kind's mask in `layer`.
    pub fn key(self, layer: usize) -> String {
        layer_key(layer, &format!("mask_{}", self.name()))
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Continuous gates in `[0, 1]`: one per head and one per FFN channel, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub head: Vec<Vec<f64>>,
    pub inter: Vec<Vec<f64>>,
}

impl MaskSet {
    pub fn ones(cfg: &ModelConfig) -> Self {
        MaskSet {
            head: vec![vec![1.0; cfg.n_heads]; cfg.n_layers],
            inter: vec![vec![1.0; cfg.d_ffn]; cfg.n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.head.len()
    }

    pub fn get(&self, kind: UnitKind) -> &[Vec<f64>] {
        match kind {
            UnitKind::Head => &self.head,
            UnitKind::Inter => &self.inter,
        }
    }

    pub fn get_mut(&mut self, kind: UnitKind) -> &mut [Vec<f64>] {
        match kind {
            UnitKind::Head => &mut self.head,
            UnitKind::Inter => &mut self.inter,
        }
    }

    pub fn layer(&self, kind: UnitKind, layer: usize) -> Result<&[f64]> {
        self.get(kind)
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfRange(format!("mask layer {layer}")))
    }

    /// Checks shapes against `cfg` and that every entry lies in `[0, 1]`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for kind in UnitKind::BOTH {
            let rows = self.get(kind);
            if rows.len() != cfg.n_layers {
                return Err(Error::Shape(format!(
                    "{kind} masks for {} layers, config has {}",
                    rows.len(),
                    cfg.n_layers
                )));
            }
            for (l, row) in rows.iter().enumerate() {
                if row.len() != kind.width(cfg) {
                    return Err(Error::Shape(format!(
                        "layer {l} {kind} mask has {} entries, expected {}",
                        row.len(),
                        kind.width(cfg)
                    )));
                }
                if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::OutOfRange(format!(
                        "layer {l} {kind} mask value {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn clamp(&mut self) {
        for v in self.head.iter_mut().chain(&mut self.inter).flatten() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensors(&self) -> MaskTensors {
        let conv = |rows: &[Vec<f64>]| {
            rows.iter()
                .map(|r| Tensor::from_parts(vec![r.len()], r.clone()))
                .collect()
        };
        MaskTensors {
            head: conv(&self.head),
            inter: conv(&self.inter),
        }
    }
}

/// Masks as tensors, ready to bind into a graph.
#[derive(Clone, Debug)]
pub struct MaskTensors {
    pub head: Vec<Tensor>,
    pub inter: Vec<Tensor>,
}

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The seven projection matrices of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Gate => "w_gate",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }

    /// `(rows, cols)` of the matrix; activations multiply on the left.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let (d, a, f) = (cfg.d_hidden, cfg.attn_width(), cfg.d_ffn);
        match self {
            Proj::Q | Proj::K | Proj::V => (d, a),
            Proj::O => (a, d),
            Proj::Gate | Proj::Up => (d, f),
            Proj::Down => (f, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerParams {
    pub fn proj(&self, p: Proj) -> &Tensor {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
            Proj::Gate => &self.w_gate,
            Proj::Up => &self.w_up,
            Proj::Down => &self.w_down,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Tensor {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
            Proj::Gate => &mut self.w_gate,
            Proj::Up => &mut self.w_up,
            Proj::Down => &mut self.w_down,
        }
    }
}

/// Dense decoder weights. Matrices are stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

pub(crate) fn layer_key(layer: usize, leaf: &str) -> String {
    format!("layers.{layer}.{leaf}")
}

impl ModelParams {
    /// Gaussian init with std 0.02; output projections are further scaled
    /// by `1/sqrt(2 L)`. Norm gains start at one.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let std = 0.02;
        let out_std = std / ((2 * cfg.n_layers) as f64).sqrt();
        let embed = Tensor::randn(&[cfg.vocab_size, cfg.d_hidden], std, rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut mat = |p: Proj| {
                let (r, c) = p.shape(cfg);
                let s = if matches!(p, Proj::O | Proj::Down) {
                    out_std
                } else {
                    std
                };
                Tensor::randn(&[r, c], s, rng)
            };
            layers.push(LayerParams {
                attn_norm: Tensor::ones(&[cfg.d_hidden]),
                wq: mat(Proj::Q),
                wk: mat(Proj::K),
                wv: mat(Proj::V),
                wo: mat(Proj::O),
                ffn_norm: Tensor::ones(&[cfg.d_hidden]),
                w_gate: mat(Proj::Gate),
                w_up: mat(Proj::Up),
                w_down: mat(Proj::Down),
            });
        }
        Ok(ModelParams {
            embed,
            layers,
            final_norm: Tensor::ones(&[cfg.d_hidden]),
            lm_head: Tensor::randn(&[cfg.d_hidden, cfg.vocab_size], std, rng),
        })
    }

    /// Every tensor under its stable name, e.g. `layers.0.wq`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((layer_key(l, "attn_norm"), &layer.attn_norm));
            out.push((layer_key(l, "ffn_norm"), &layer.ffn_norm));
            for p in Proj::ALL {
                out.push((layer_key(l, p.name()), layer.proj(p)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
            } = layer;
            out.push((layer_key(l, "attn_norm"), attn_norm));
            out.push((layer_key(l, "ffn_norm"), ffn_norm));
            for (p, t) in Proj::ALL
                .into_iter()
                .zip([wq, wk, wv, wo, w_gate, w_up, w_down])
            {
                out.push((layer_key(l, p.name()), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.named()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect()
    }

    pub fn from_map(cfg: &ModelConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{k}`")))
        };
        let embed = take("embed")?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_norm: take(&layer_key(l, "attn_norm"))?,
                wq: take(&layer_key(l, "wq"))?,
                wk: take(&layer_key(l, "wk"))?,
                wv: take(&layer_key(l, "wv"))?,
                wo: take(&layer_key(l, "wo"))?,
                ffn_norm: take(&layer_key(l, "ffn_norm"))?,
                w_gate: take(&layer_key(l, "w_gate"))?,
                w_up: take(&layer_key(l, "w_up"))?,
                w_down: take(&layer_key(l, "w_down"))?,
            });
        }
        let params = ModelParams {
            embed,
            layers,
            final_norm: take("final_norm")?,
            lm_head: take("lm_head")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        params.validate(cfg)?;
        Ok(params)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |name: &str, t: &Tensor, want: &[usize]| {
            if t.shape() != want {
                Err(Error::Shape(format!(
                    "{name}: expected {want:?}, found {:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} layers for a {}-layer config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        check("embed", &self.embed, &[cfg.vocab_size, cfg.d_hidden])?;
        check("final_norm", &self.final_norm, &[cfg.d_hidden])?;
        check("lm_head", &self.lm_head, &[cfg.d_hidden, cfg.vocab_size])?;
        for (l, layer) in self.layers.iter().enumerate() {
            check(
                &layer_key(l, "attn_norm"),
                &layer.attn_norm,
                &[cfg.d_hidden],
            )?;
            check(&layer_key(l, "ffn_norm"), &layer.ffn_norm, &[cfg.d_hidden])?;
            for p in Proj::ALL {
                let (r, c) = p.shape(cfg);
                check(&layer_key(l, p.name()), layer.proj(p), &[r, c])?;
            }
        }
        Ok(())
    }

    /// Number of weights in the prunable projection matrices.
    pub fn prunable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| Proj::ALL.iter().map(|&p| l.proj(p).numel()).sum::<usize>())
            .sum()
    }
}

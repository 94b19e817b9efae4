use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{layer_key, ModelParams, Proj};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Low-rank update `delta W = B A` for a `d x k` weight, with `B: d x r`
/// and `A: r x k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Shape("LoRA factors must be matrices".into()));
        }
        if b.cols() != a.rows() {
            return Err(Error::Shape(format!(
                "LoRA rank mismatch: B is {:?}, A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(LoraAdapter { a, b })
    }

    /// `B = 0` so the adapter starts as the identity update; `A` is Gaussian
    /// with std `1/sqrt(k)`.
    pub fn init<R: Rng + ?Sized>(d: usize, k: usize, rank: usize, rng: &mut R) -> Self {
        LoraAdapter {
            a: Tensor::randn(&[rank, k], 1.0 / (k as f64).sqrt(), rng),
            b: Tensor::zeros(&[d, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }
}

/// `W + B A`.
pub fn apply_lora(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w.shape() != [adapter.b.rows(), adapter.a.cols()] {
        return Err(Error::Shape(format!(
            "LoRA update {}x{} does not fit weight {:?}",
            adapter.b.rows(),
            adapter.a.cols(),
            w.shape()
        )));
    }
    w.add(&adapter.delta()?)
}

/// Adapters for a subset of projections in every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub rank: usize,
    pub layers: Vec<BTreeMap<Proj, LoraAdapter>>,
}

impl LoraSet {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        rank: usize,
        targets: &[Proj],
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        let layers = (0..cfg.n_layers)
            .map(|_| {
                targets
                    .iter()
                    .map(|&p| {
                        let (d, k) = p.shape(cfg);
                        (p, LoraAdapter::init(d, k, rank, rng))
                    })
                    .collect()
            })
            .collect();
        Ok(LoraSet { rank, layers })
    }

    pub fn targets(&self) -> Vec<Proj> {
        self.layers
            .first()
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "LoRA set has {} layers, config has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let targets = self.targets();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.keys().copied().collect::<Vec<_>>() != targets {
                return Err(Error::Structure(format!(
                    "layer {l} adapts a different set of projections"
                )));
            }
            for (&p, ad) in layer {
                let (d, k) = p.shape(cfg);
                if ad.rank() != self.rank
                    || ad.b.shape() != [d, self.rank]
                    || ad.a.shape() != [self.rank, k]
                {
                    return Err(Error::Shape(format!(
                        "{}: adapter B {:?}, A {:?} for a {d}x{k} weight of rank {}",
                        layer_key(l, p.name()),
                        ad.b.shape(),
                        ad.a.shape(),
                        self.rank
                    )));
                }
            }
        }
        Ok(())
    }

    /// Placeholder names for the two factors of an adapter.
    pub(crate) fn keys(layer: usize, p: Proj) -> (String, String) {
        let base = layer_key(layer, p.name());
        (format!("{base}.lora_a"), format!("{base}.lora_b"))
    }

    /// Every factor under its placeholder name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (&p, ad) in layer {
                let (ka, kb) = Self::keys(l, p);
                out.push((ka, &ad.a));
                out.push((kb, &ad.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (&p, ad) in layer.iter_mut() {
                let (ka, kb) = Self::keys(l, p);
                out.push((ka, &mut ad.a));
                out.push((kb, &mut ad.b));
            }
        }
        out
    }

    /// Dense weights with every adapter merged in.
    pub fn merge_into(&self, params: &ModelParams) -> Result<ModelParams> {
        if self.layers.len() != params.layers.len() {
            return Err(Error::Shape("LoRA set and model disagree on depth".into()));
        }
        let mut out = params.clone();
        for (layer, adapters) in out.layers.iter_mut().zip(&self.layers) {
            for (&p, ad) in adapters {
                let merged = apply_lora(layer.proj(p), ad)?;
                *layer.proj_mut(p) = merged;
            }
        }
        Ok(out)
    }
}

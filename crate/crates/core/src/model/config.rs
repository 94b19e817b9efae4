use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Shape of a LLaMA-style decoder.
///
/// A dense model has `n_heads * head_dim == d_hidden`; a pruned model keeps
/// `d_hidden` and `head_dim` but carries fewer heads and FFN channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_hidden: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            d_hidden: 64,
            d_ffn: 172,
            vocab_size: 256,
            seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_hidden", self.d_hidden),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even for rotary embeddings, got {}",
                self.head_dim
            )));
        }
        if self.n_heads * self.head_dim > self.d_hidden {
            return Err(Error::Config(format!(
                "n_heads * head_dim = {} exceeds d_hidden = {}",
                self.n_heads * self.head_dim,
                self.d_hidden
            )));
        }
        if self.d_ffn < self.n_heads {
            return Err(Error::Config(format!(
                "d_ffn ({}) must be >= n_heads ({})",
                self.d_ffn, self.n_heads
            )));
        }
        Ok(())
    }

    /// Validation for an unpruned model, which must tile `d_hidden` with heads.
    pub fn validate_dense(&self) -> Result<()> {
        self.validate()?;
        if self.n_heads * self.head_dim != self.d_hidden {
            return Err(Error::Config(format!(
                "dense model needs n_heads * head_dim == d_hidden ({} * {} != {})",
                self.n_heads, self.head_dim, self.d_hidden
            )));
        }
        Ok(())
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Parameters owned by one attention head across W_Q, W_K, W_V and W_O.
    pub fn head_cost(&self) -> usize {
        4 * self.d_hidden * self.head_dim
    }

    /// Parameters owned by one FFN channel across W_gate, W_up and W_down.
    pub fn channel_cost(&self) -> usize {
        3 * self.d_hidden
    }

    /// Parameters in the prunable projection matrices of all layers.
    pub fn prunable_params(&self) -> usize {
        self.n_layers * (self.n_heads * self.head_cost() + self.d_ffn * self.channel_cost())
    }

    pub fn total_params(&self) -> usize {
        let norms = self.n_layers * 2 * self.d_hidden + self.d_hidden;
        let embed = 2 * self.vocab_size * self.d_hidden;
        self.prunable_params() + norms + embed
    }
}

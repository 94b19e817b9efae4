//! Graph construction for the decoder and its masked sublayers.

use super::config::{ModelConfig, RMS_EPS, ROPE_BASE};
use super::lora::LoraSet;
use super::masks::{MaskSet, MaskTensors, UnitKind};
use super::params::{layer_key, ModelParams, Proj};
use crate::diffcore::{Bindings, Graph, NodeId, Tensor, Values};
use crate::error::{Error, Result};

/// Which placeholders are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Forward-only graph.
    Nothing,
    /// Masks and LoRA factors; base weights are frozen inputs.
    MasksAndLora,
    /// Every placeholder, base weights included.
    Everything,
}

#[derive(Clone, Debug)]
pub struct GraphOptions {
    /// Insert head and channel masks.
    pub masks: bool,
    /// Projections carrying a LoRA adapter; empty for none.
    pub lora_targets: Vec<Proj>,
    pub lora_rank: usize,
    pub trainable: Trainable,
}

impl GraphOptions {
    /// Plain dense forward pass.
    pub fn dense() -> Self {
        GraphOptions {
            masks: false,
            lora_targets: Vec::new(),
            lora_rank: 0,
            trainable: Trainable::Nothing,
        }
    }

    /// Options mirroring whatever masks and adapters are present.
    pub fn for_state(masks: bool, lora: Option<&LoraSet>, trainable: Trainable) -> Self {
        GraphOptions {
            masks,
            lora_targets: lora.map(LoraSet::targets).unwrap_or_default(),
            lora_rank: lora.map_or(0, |l| l.rank),
            trainable,
        }
    }
}

struct LayerNodes {
    attn_norm: NodeId,
    ffn_norm: NodeId,
    proj: [NodeId; 7],
    lora: [Option<(NodeId, NodeId)>; 7],
    mask_head: Option<NodeId>,
    mask_inter: Option<NodeId>,
}

struct Builder<'c> {
    g: Graph,
    cfg: &'c ModelConfig,
    opts: GraphOptions,
}

impl<'c> Builder<'c> {
    fn new(cfg: &'c ModelConfig, opts: GraphOptions) -> Result<Self> {
        cfg.validate()?;
        if !opts.lora_targets.is_empty() && opts.lora_rank == 0 {
            return Err(Error::Config("LoRA targets given with rank 0".into()));
        }
        Ok(Builder {
            g: Graph::new(),
            cfg,
            opts,
        })
    }

    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        match self.opts.trainable {
            Trainable::Everything => self.g.param(name, shape),
            _ => self.g.input(name, shape),
        }
    }

    fn adjustable(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        match self.opts.trainable {
            Trainable::Nothing => self.g.input(name, shape),
            _ => self.g.param(name, shape),
        }
    }

    fn declare_layer(&mut self, l: usize) -> Result<LayerNodes> {
        let cfg = self.cfg;
        let d = cfg.d_hidden;
        let attn_norm = self.weight(&layer_key(l, "attn_norm"), &[d])?;
        let ffn_norm = self.weight(&layer_key(l, "ffn_norm"), &[d])?;
        let mut proj = [attn_norm; 7];
        let mut lora = [None; 7];
        for (i, p) in Proj::ALL.into_iter().enumerate() {
            let (r, c) = p.shape(cfg);
            proj[i] = self.weight(&layer_key(l, p.name()), &[r, c])?;
            if self.opts.lora_targets.contains(&p) {
                let (ka, kb) = LoraSet::keys(l, p);
                let rank = self.opts.lora_rank;
                let a = self.adjustable(&ka, &[rank, c])?;
                let b = self.adjustable(&kb, &[r, rank])?;
                lora[i] = Some((a, b));
            }
        }
        let (mask_head, mask_inter) = if self.opts.masks {
            (
                Some(self.adjustable(&UnitKind::Head.key(l), &[cfg.n_heads])?),
                Some(self.adjustable(&UnitKind::Inter.key(l), &[cfg.d_ffn])?),
            )
        } else {
            (None, None)
        };
        Ok(LayerNodes {
            attn_norm,
            ffn_norm,
            proj,
            lora,
            mask_head,
            mask_inter,
        })
    }

    /// `x W`, plus `(x B) A` when the projection is adapted.
    fn linear(&mut self, x: NodeId, nodes: &LayerNodes, p: Proj) -> Result<NodeId> {
        let i = p as usize;
        let base = self.g.matmul(x, nodes.proj[i])?;
        match nodes.lora[i] {
            None => Ok(base),
            Some((a, b)) => {
                let xb = self.g.matmul(x, b)?;
                let delta = self.g.matmul(xb, a)?;
                self.g.add(base, delta)
            }
        }
    }

    /// Masked multi-head causal self-attention on `x` (already normalised).
    fn attention(&mut self, x: NodeId, nodes: &LayerNodes) -> Result<NodeId> {
        let hd = self.cfg.head_dim;
        let q = self.linear(x, nodes, Proj::Q)?;
        let k = self.linear(x, nodes, Proj::K)?;
        let v = self.linear(x, nodes, Proj::V)?;
        let q = self.g.rope(q, hd, ROPE_BASE)?;
        let k = self.g.rope(k, hd, ROPE_BASE)?;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = self.g.slice_cols(q, h * hd, hd)?;
            let kh = self.g.slice_cols(k, h * hd, hd)?;
            let vh = self.g.slice_cols(v, h * hd, hd)?;
            let scores = self.g.matmul_bt(qh, kh)?;
            let scores = self.g.scale(scores, inv)?;
            let probs = self.g.causal_softmax(scores)?;
            heads.push(self.g.matmul(probs, vh)?);
        }
        let mut cat = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_cols(&heads)?
        };
        if let Some(m) = nodes.mask_head {
            let per_col = self.g.repeat_each(m, hd)?;
            cat = self.g.mul_row(cat, per_col)?;
        }
        self.linear(cat, nodes, Proj::O)
    }

    /// Masked SwiGLU feed-forward on `x` (already normalised).
    fn ffn(&mut self, x: NodeId, nodes: &LayerNodes) -> Result<NodeId> {
        let gate = self.linear(x, nodes, Proj::Gate)?;
        let gate = self.g.silu(gate)?;
        let up = self.linear(x, nodes, Proj::Up)?;
        let mut act = self.g.mul(gate, up)?;
        if let Some(m) = nodes.mask_inter {
            act = self.g.mul_row(act, m)?;
        }
        self.linear(act, nodes, Proj::Down)
    }
}

/// A built decoder graph for a fixed sequence length.
pub struct LmGraph {
    pub graph: Graph,
    pub tokens: NodeId,
    pub logits: NodeId,
    /// Residual stream after each block.
    pub hiddens: Vec<NodeId>,
    pub len: usize,
    pub opts: GraphOptions,
}

impl LmGraph {
    pub fn build(cfg: &ModelConfig, opts: GraphOptions, len: usize) -> Result<Self> {
        if len == 0 || len > cfg.seq_len {
            return Err(Error::OutOfRange(format!(
                "sequence length {len} not in 1..={}",
                cfg.seq_len
            )));
        }
        let mut b = Builder::new(cfg, opts)?;
        let tokens = b.g.input("tokens", &[len])?;
        let embed = b.weight("embed", &[cfg.vocab_size, cfg.d_hidden])?;
        let mut h = b.g.embedding(embed, tokens)?;
        let mut hiddens = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let nodes = b.declare_layer(l)?;
            let x = b.g.rms_norm(h, nodes.attn_norm, RMS_EPS)?;
            let a = b.attention(x, &nodes)?;
            h = b.g.add(h, a)?;
            let x = b.g.rms_norm(h, nodes.ffn_norm, RMS_EPS)?;
            let f = b.ffn(x, &nodes)?;
            h = b.g.add(h, f)?;
            hiddens.push(h);
        }
        let final_norm = b.weight("final_norm", &[cfg.d_hidden])?;
        let lm_head = b.weight("lm_head", &[cfg.d_hidden, cfg.vocab_size])?;
        let x = b.g.rms_norm(h, final_norm, RMS_EPS)?;
        let logits = b.g.matmul(x, lm_head)?;
        Ok(LmGraph {
            graph: b.g,
            tokens,
            logits,
            hiddens,
            len,
            opts: b.opts,
        })
    }

    pub fn outputs(&self, values: &Values<'_>) -> LmOutput {
        LmOutput {
            logits: values.get(self.logits).clone(),
            hiddens: self
                .hiddens
                .iter()
                .map(|&h| values.get(h).clone())
                .collect(),
        }
    }
}

/// Checks ids against the vocabulary and the context length.
pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.seq_len {
        return Err(Error::OutOfRange(format!(
            "sequence of {} tokens exceeds seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if let Some((i, &t)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t >= cfg.vocab_size)
    {
        return Err(Error::OutOfRange(format!(
            "token {t} at position {i} >= vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn bind_params<'a>(b: &mut Bindings<'a>, params: &'a ModelParams) {
    for (name, t) in params.named() {
        b.bind(name, t);
    }
}

pub fn bind_masks<'a>(b: &mut Bindings<'a>, masks: &'a MaskTensors) {
    for (l, t) in masks.head.iter().enumerate() {
        b.bind(UnitKind::Head.key(l), t);
    }
    for (l, t) in masks.inter.iter().enumerate() {
        b.bind(UnitKind::Inter.key(l), t);
    }
}

pub fn bind_lora<'a>(b: &mut Bindings<'a>, lora: &'a LoraSet) {
    for (name, t) in lora.named() {
        b.bind(name, t);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    pub logits: Tensor,
    pub hiddens: Vec<Tensor>,
}

fn check_state(
    cfg: &ModelConfig,
    params: &ModelParams,
    masks: Option<&MaskSet>,
    lora: Option<&LoraSet>,
) -> Result<()> {
    params.validate(cfg)?;
    if let Some(m) = masks {
        m.validate(cfg)?;
    }
    if let Some(l) = lora {
        l.validate(cfg)?;
    }
    Ok(())
}

/// Full decoder forward pass. Builds a fresh graph; loops over many
/// sequences should build an [`LmGraph`] once and reuse it.
pub fn forward_lm(
    cfg: &ModelConfig,
    params: &ModelParams,
    masks: Option<&MaskSet>,
    lora: Option<&LoraSet>,
    tokens: &[usize],
) -> Result<LmOutput> {
    check_tokens(cfg, tokens)?;
    check_state(cfg, params, masks, lora)?;
    let opts = GraphOptions::for_state(masks.is_some(), lora, Trainable::Nothing);
    let lm = LmGraph::build(cfg, opts, tokens.len())?;
    let ids = Tensor::ids(tokens);
    let mask_t = masks.map(MaskSet::to_tensors);
    let mut b = Bindings::new();
    b.bind("tokens", &ids);
    bind_params(&mut b, params);
    if let Some(m) = &mask_t {
        bind_masks(&mut b, m);
    }
    if let Some(l) = lora {
        bind_lora(&mut b, l);
    }
    let values = lm.graph.forward(&b)?;
    Ok(lm.outputs(&values))
}

enum Sublayer {
    Attention,
    Ffn,
}

fn run_sublayer(
    which: Sublayer,
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor,
    masks: &MaskSet,
    params: &ModelParams,
    lora: Option<&LoraSet>,
) -> Result<Tensor> {
    if layer >= cfg.n_layers {
        return Err(Error::OutOfRange(format!(
            "layer {layer} of a {}-layer model",
            cfg.n_layers
        )));
    }
    check_state(cfg, params, Some(masks), lora)?;
    if x.shape().len() != 2 || x.cols() != cfg.d_hidden || x.rows() > cfg.seq_len {
        return Err(Error::Shape(format!(
            "sublayer input {:?}, expected (<= {}, {})",
            x.shape(),
            cfg.seq_len,
            cfg.d_hidden
        )));
    }
    let opts = GraphOptions::for_state(true, lora, Trainable::Nothing);
    let mut bld = Builder::new(cfg, opts)?;
    let xin = bld.g.input("x", x.shape())?;
    let nodes = bld.declare_layer(layer)?;
    let out = match which {
        Sublayer::Attention => bld.attention(xin, &nodes)?,
        Sublayer::Ffn => bld.ffn(xin, &nodes)?,
    };
    let mask_t = masks.to_tensors();
    let lp = &params.layers[layer];
    let mut b = Bindings::new();
    b.bind("x", x);
    b.bind(layer_key(layer, "attn_norm"), &lp.attn_norm);
    b.bind(layer_key(layer, "ffn_norm"), &lp.ffn_norm);
    for p in Proj::ALL {
        b.bind(layer_key(layer, p.name()), lp.proj(p));
    }
    b.bind(UnitKind::Head.key(layer), &mask_t.head[layer]);
    b.bind(UnitKind::Inter.key(layer), &mask_t.inter[layer]);
    if let Some(set) = lora {
        for (&p, ad) in &set.layers[layer] {
            let (ka, kb) = LoraSet::keys(layer, p);
            b.bind(ka, &ad.a);
            b.bind(kb, &ad.b);
        }
    }
    let values = bld.g.forward(&b)?;
    Ok(values.get(out).clone())
}

/// Masked causal multi-head attention of block `layer` applied to `x`
/// (the normalised block input): `sum_j m_head[j] * Attn_j(x)` through `W_O`.
pub fn mha_masked(
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor,
    masks: &MaskSet,
    params: &ModelParams,
    lora: Option<&LoraSet>,
) -> Result<Tensor> {
    run_sublayer(Sublayer::Attention, cfg, layer, x, masks, params, lora)
}

/// Masked SwiGLU feed-forward of block `layer` applied to `x`:
/// `((silu(x W_gate) * x W_up) * m_inter) W_down`.
pub fn ffn_masked(
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor,
    masks: &MaskSet,
    params: &ModelParams,
    lora: Option<&LoraSet>,
) -> Result<Tensor> {
    run_sublayer(Sublayer::Ffn, cfg, layer, x, masks, params, lora)
}

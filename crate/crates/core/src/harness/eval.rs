use std::collections::BTreeMap;

use rayon::prelude::*;

use super::corpus::eval_windows;
use crate::diffcore::{kernels, Bindings, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    bind_lora, bind_masks, bind_params, check_tokens, GraphOptions, LmGraph, LoraSet, MaskSet,
    ModelConfig, ModelParams, Trainable,
};

/// Borrowed view of a model with optional masks and adapters.
#[derive(Clone, Copy, Debug)]
pub struct ModelRef<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub masks: Option<&'a MaskSet>,
    pub lora: Option<&'a LoraSet>,
}

impl<'a> ModelRef<'a> {
    pub fn dense(cfg: &'a ModelConfig, params: &'a ModelParams) -> Self {
        ModelRef {
            cfg,
            params,
            masks: None,
            lora: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.params.validate(self.cfg)?;
        if let Some(m) = self.masks {
            m.validate(self.cfg)?;
        }
        if let Some(l) = self.lora {
            l.validate(self.cfg)?;
        }
        Ok(())
    }

    /// Logits for each sequence; graphs are built once per distinct length.
    pub fn logits(&self, seqs: &[&[usize]]) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut graphs = BTreeMap::new();
        for s in seqs {
            check_tokens(self.cfg, s)?;
            if let std::collections::btree_map::Entry::Vacant(e) = graphs.entry(s.len()) {
                let opts =
                    GraphOptions::for_state(self.masks.is_some(), self.lora, Trainable::Nothing);
                e.insert(LmGraph::build(self.cfg, opts, s.len())?);
            }
        }
        let masks = self.masks.map(MaskSet::to_tensors);
        seqs.par_iter()
            .map(|s| {
                let g = &graphs[&s.len()];
                let ids = Tensor::ids(s);
                let mut b = Bindings::new();
                b.bind("tokens", &ids);
                bind_params(&mut b, self.params);
                if let Some(m) = &masks {
                    bind_masks(&mut b, m);
                }
                if let Some(l) = self.lora {
                    bind_lora(&mut b, l);
                }
                let v = g.graph.forward(&b)?;
                Ok(v.get(g.logits).clone())
            })
            .collect()
    }
}

/// Summed negative log-likelihood of `targets` under row-wise softmax.
pub fn nll_sum(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{:?} logits for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let v = logits.cols();
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::OutOfRange(format!("target {t} >= vocab {v}")));
    }
    Ok(kernels::cross_entropy_rows(logits.data(), targets, v) * targets.len() as f64)
}

/// `exp(mean next-token NLL)` over `tokens`, read in windows of `window`.
pub fn eval_ppl(model: ModelRef<'_>, tokens: &[usize], window: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two tokens to evaluate".into(),
        ));
    }
    if window == 0 || window > model.cfg.seq_len {
        return Err(Error::Config(format!(
            "eval window {window} not in 1..={}",
            model.cfg.seq_len
        )));
    }
    let windows = eval_windows(tokens, window);
    let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let logits = model.logits(&inputs)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (w, l) in windows.iter().zip(&logits) {
        total += nll_sum(l, &w[1..])?;
        count += w.len() - 1;
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_hand_fixture() {
        // two-symbol vocabulary, probabilities (0.8, 0.2) then (0.5, 0.5) ...
        let rows = [[0.8f64, 0.2], [0.5, 0.5], [0.1, 0.9]];
        let data: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        let logits = Tensor::matrix(3, 2, data).unwrap();
        let targets = [0, 1, 1];
        let want = -(0.8f64.ln() + 0.5f64.ln() + 0.9f64.ln());
        assert!((nll_sum(&logits, &targets).unwrap() - want).abs() < 1e-12);
        let ppl = (want / 3.0).exp();
        assert!((ppl - (1.0 / (0.8 * 0.5 * 0.9f64)).powf(1.0 / 3.0)).abs() < 1e-12);
        assert!(nll_sum(&logits, &[0, 2, 1]).is_err());
    }

    #[test]
    fn uniform_logits_give_vocab_size() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            d_hidden: 8,
            d_ffn: 8,
            vocab_size: 32,
            seq_len: 16,
        };
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.lm_head = Tensor::zeros(&[8, 32]);
        let toks: Vec<usize> = (0..50).map(|i| (i * 7) % 32).collect();
        let ppl = eval_ppl(ModelRef::dense(&cfg, &p), &toks, 16).unwrap();
        assert!((ppl - 32.0).abs() < 1e-9);
    }
}

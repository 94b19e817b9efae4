use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::eval::{eval_ppl, ModelRef};
use crate::diffcore::{Bindings, Tensor};
use crate::error::{Error, Result};
use crate::minimax::{AdamW, WindowSampler};
use crate::model::{bind_params, GraphOptions, LmGraph, ModelConfig, ModelParams, Trainable};

/// Dense next-token training of the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub window: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Final eval perplexity must fall below this fraction of the untrained one.
    pub max_ppl_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 16,
            window: 64,
            lr: 3e-3,
            warmup: 50,
            weight_decay: 0.0,
            seed: 0,
            max_ppl_ratio: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub untrained_ppl: f64,
    pub final_ppl: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Trains a fresh dense model by next-token cross-entropy on the training
/// split. Fails with [`Error::ConstraintNotMet`] when eval perplexity does
/// not fall below `max_ppl_ratio` times its untrained value.
pub fn pretrain(
    cfg: &ModelConfig,
    corpus: &Corpus,
    pc: &PretrainConfig,
) -> Result<(ModelParams, PretrainReport)> {
    pretrain_with(cfg, corpus, pc, |_, _| {})
}

pub fn pretrain_with<F: FnMut(usize, f64)>(
    cfg: &ModelConfig,
    corpus: &Corpus,
    pc: &PretrainConfig,
    mut observe: F,
) -> Result<(ModelParams, PretrainReport)> {
    cfg.validate_dense()?;
    if pc.steps == 0 || pc.batch_size == 0 || pc.window == 0 || pc.window > cfg.seq_len {
        return Err(Error::Config(
            "pretrain needs steps, batch_size >= 1 and 1 <= window <= seq_len".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut params = ModelParams::init(cfg, &mut rng)?;
    let eval_window = cfg.seq_len;
    let untrained_ppl = eval_ppl(ModelRef::dense(cfg, &params), corpus.eval(), eval_window)?;

    let opts = GraphOptions {
        trainable: Trainable::Everything,
        ..GraphOptions::dense()
    };
    let mut lm = LmGraph::build(cfg, opts, pc.window)?;
    let targets_node = lm.graph.input("targets", &[pc.window])?;
    let loss_node = lm.graph.cross_entropy(lm.logits, targets_node)?;
    let mut sampler = WindowSampler::new(corpus.train(), pc.window, pc.seed)?;
    let mut opt = AdamW::new(pc.lr, pc.weight_decay);
    let mut losses = Vec::with_capacity(pc.steps);

    for step in 0..pc.steps {
        let batch = sampler.next_batch(pc.batch_size);
        let per_seq: Vec<(f64, Vec<(String, Tensor)>)> = batch
            .par_iter()
            .map(|w| {
                let ids = Tensor::ids(&w[..pc.window]);
                let tgt = Tensor::ids(&w[1..]);
                let mut b = Bindings::new();
                b.bind("tokens", &ids);
                b.bind("targets", &tgt);
                bind_params(&mut b, &params);
                let v = lm.graph.forward(&b)?;
                let loss = v.get(loss_node).item()?;
                let g = lm.graph.backward(&v, loss_node)?;
                Ok((loss, g.into_map().into_iter().collect()))
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut sum: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, (l, grads)) in per_seq.into_iter().enumerate() {
            loss += l * inv;
            for (j, (name, g)) in grads.into_iter().enumerate() {
                if i == 0 {
                    sum.push((name, g.data().iter().map(|v| v * inv).collect()));
                } else {
                    for (a, v) in sum[j].1.iter_mut().zip(g.data()) {
                        *a += v * inv;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical {
                iteration: step,
                detail: format!("pretraining loss is {loss}"),
            });
        }
        opt.lr = pc.lr * ((step + 1) as f64 / pc.warmup.max(1) as f64).min(1.0);
        opt.begin_step();
        let mut named = params.named_mut();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        for ((name, t), (gname, g)) in named.into_iter().zip(&sum) {
            debug_assert_eq!(&name, gname);
            opt.update(&name, t.data_mut(), g)?;
        }
        losses.push(loss);
        observe(step, loss);
    }

    let final_ppl = eval_ppl(ModelRef::dense(cfg, &params), corpus.eval(), eval_window)?;
    let report = PretrainReport {
        untrained_ppl,
        final_ppl,
        final_loss: *losses.last().expect("at least one step"),
        losses,
    };
    if final_ppl.is_nan() || final_ppl >= pc.max_ppl_ratio * untrained_ppl {
        return Err(Error::ConstraintNotMet(format!(
            "eval perplexity {final_ppl:.3} is not below {} x untrained {untrained_ppl:.3}",
            pc.max_ppl_ratio
        )));
    }
    Ok((params, report))
}

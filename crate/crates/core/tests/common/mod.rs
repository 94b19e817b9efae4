//! Shared central-difference check of the distillation gradient with
//! respect to masks, LoRA factors and every base weight of a two-layer toy
//! decoder.

use std::collections::BTreeMap;

use maskprune::diffcore::{finite_diff, Bindings, Tensor};
use maskprune::model::{
    forward_lm, GraphOptions, LoraSet, MaskSet, ModelConfig, ModelParams, Proj, Trainable, UnitKind,
};
use maskprune::objective::{
    teacher_hidden_key, DistillConfig, DistillGraph, TARGETS, TEACHER_LOGITS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

pub fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        d_hidden: 8,
        d_ffn: 7,
        vocab_size: 9,
        seq_len: 5,
    }
}

pub struct Problem {
    graph: DistillGraph,
    inputs: BTreeMap<String, Tensor>,
}

impl Problem {
    pub fn new(seed: u64, distill: &DistillConfig) -> Self {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut teacher = student.clone();
        for (_, t) in teacher.named_mut() {
            let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
            *t = t.add(&noise).unwrap();
        }
        let mut lora = LoraSet::init(&cfg, 2, &Proj::ALL, &mut rng).unwrap();
        for layer in &mut lora.layers {
            for ad in layer.values_mut() {
                ad.b = Tensor::randn(ad.b.shape(), 0.2, &mut rng);
            }
        }
        let mut masks = MaskSet::ones(&cfg);
        for v in masks.head.iter_mut().chain(&mut masks.inter).flatten() {
            *v = rng.random_range(0.2..1.0);
        }
        let n = cfg.seq_len - 1;
        let tokens: Vec<usize> = (0..=n)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        let t_out = forward_lm(&cfg, &teacher, None, None, &tokens[..n]).unwrap();

        let opts = GraphOptions::for_state(true, Some(&lora), Trainable::Everything);
        let graph = DistillGraph::build(&cfg, opts, n, distill).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("tokens".to_string(), Tensor::ids(&tokens[..n]));
        if distill.include_lm_loss {
            inputs.insert(TARGETS.to_string(), Tensor::ids(&tokens[1..]));
        }
        inputs.insert(TEACHER_LOGITS.to_string(), t_out.logits);
        for (l, h) in t_out.hiddens.into_iter().enumerate() {
            inputs.insert(teacher_hidden_key(l), h);
        }
        for (k, t) in student.named().into_iter().chain(lora.named()) {
            inputs.insert(k, t.clone());
        }
        let mt = masks.to_tensors();
        for (l, (h, i)) in mt.head.into_iter().zip(mt.inter).enumerate() {
            inputs.insert(UnitKind::Head.key(l), h);
            inputs.insert(UnitKind::Inter.key(l), i);
        }
        Problem { graph, inputs }
    }

    fn loss_with(&self, name: &str, value: &Tensor) -> f64 {
        let mut b = Bindings::new();
        for (k, t) in &self.inputs {
            b.bind(k.clone(), if k == name { value } else { t });
        }
        let g = &self.graph;
        let v = g.lm.graph.forward(&b).unwrap();
        v.get(g.loss).item().unwrap()
    }

    /// Largest per-tensor `|analytic - fd| / |fd|` (2-norms) over all
    /// trainable tensors, and the number of tensors checked.
    pub fn worst_relative_error(&self) -> (f64, usize, String) {
        let mut b = Bindings::new();
        for (k, t) in &self.inputs {
            b.bind(k.clone(), t);
        }
        let g = &self.graph;
        let values = g.lm.graph.forward(&b).unwrap();
        let grads = g.lm.graph.backward(&values, g.loss).unwrap();
        let mut worst = (0.0, 0, String::new());
        for (name, analytic) in grads.iter() {
            let x = &self.inputs[name];
            let fd = finite_diff(|t| Ok(self.loss_with(name, t)), x, 1e-5).unwrap();
            let diff: f64 = analytic
                .data()
                .iter()
                .zip(fd.data())
                .map(|(a, f)| (a - f).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = fd
                .data()
                .iter()
                .map(|f| f * f)
                .sum::<f64>()
                .sqrt()
                .max(1e-8);
            let rel = diff / norm;
            if rel > worst.0 {
                worst = (rel, worst.1, name.clone());
            }
            worst.1 += 1;
        }
        worst
    }
}

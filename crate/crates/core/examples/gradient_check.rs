//! Reverse-mode gradients of the distillation loss against central
//! differences, for head masks, channel masks and a LoRA factor.
//!
//!     cargo run --example gradient_check

use maskprune::diffcore::{finite_diff, Bindings, Tensor};
use maskprune::model::{
    bind_lora, bind_params, forward_lm, GraphOptions, LoraSet, ModelConfig, ModelParams, Proj,
    Trainable, UnitKind,
};
use maskprune::objective::{teacher_hidden_key, DistillConfig, DistillGraph, TEACHER_LOGITS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maskprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        d_hidden: 8,
        d_ffn: 12,
        vocab_size: 16,
        seq_len: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let teacher = ModelParams::init(&cfg, &mut rng)?;
    let mut lora = LoraSet::init(&cfg, 2, &Proj::ALL, &mut rng)?;
    for layer in &mut lora.layers {
        for ad in layer.values_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.3, &mut rng);
        }
    }
    let tokens = [3, 1, 4, 1, 5, 9];
    let t_out = forward_lm(&cfg, &teacher, None, None, &tokens)?;

    let opts = GraphOptions::for_state(true, Some(&lora), Trainable::MasksAndLora);
    let dg = DistillGraph::build(&cfg, opts, tokens.len(), &DistillConfig::default())?;
    let ids = Tensor::ids(&tokens);
    let keys: Vec<String> = (0..cfg.n_layers).map(teacher_hidden_key).collect();
    let mut masks: Vec<(String, Tensor)> = Vec::new();
    for l in 0..cfg.n_layers {
        masks.push((UnitKind::Head.key(l), Tensor::new(vec![2], vec![0.7, 0.4])?));
        let inter = (0..cfg.d_ffn).map(|i| 0.3 + 0.05 * i as f64).collect();
        masks.push((UnitKind::Inter.key(l), Tensor::new(vec![cfg.d_ffn], inter)?));
    }

    let loss = |replace: Option<(&str, &Tensor)>| -> maskprune::Result<f64> {
        let mut b = Bindings::new();
        b.bind("tokens", &ids);
        bind_params(&mut b, &teacher);
        bind_lora(&mut b, &lora);
        b.bind(TEACHER_LOGITS, &t_out.logits);
        for (k, h) in keys.iter().zip(&t_out.hiddens) {
            b.bind(k.clone(), h);
        }
        for (k, t) in &masks {
            match replace {
                Some((name, v)) if name == k => b.bind(k.clone(), v),
                _ => b.bind(k.clone(), t),
            };
        }
        if let Some((name, v)) = replace.filter(|(n, _)| n.contains("lora")) {
            b.bind(name, v);
        }
        dg.lm.graph.forward(&b)?.get(dg.loss).item()
    };

    let mut b = Bindings::new();
    b.bind("tokens", &ids);
    bind_params(&mut b, &teacher);
    bind_lora(&mut b, &lora);
    b.bind(TEACHER_LOGITS, &t_out.logits);
    for (k, h) in keys.iter().zip(&t_out.hiddens) {
        b.bind(k.clone(), h);
    }
    for (k, t) in &masks {
        b.bind(k.clone(), t);
    }
    let values = dg.lm.graph.forward(&b)?;
    let grads = dg.lm.graph.backward(&values, dg.loss)?;
    println!("loss {:.6}", values.get(dg.loss).item()?);

    let lora_key = "layers.0.wv.lora_b".to_string();
    let lora_value = lora
        .named()
        .into_iter()
        .find(|(k, _)| *k == lora_key)
        .unwrap()
        .1
        .clone();
    let mut checks: Vec<(String, Tensor)> = masks.clone();
    checks.push((lora_key, lora_value));
    for (name, x) in &checks {
        let analytic = grads.get(name).expect("trainable placeholder");
        let fd = finite_diff(|t| loss(Some((name, t))), x, 1e-5)?;
        let err = analytic
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, f)| (a - f).abs())
            .fold(0.0, f64::max);
        let scale = fd.data().iter().map(|f| f.abs()).fold(0.0, f64::max);
        println!("{name:<22} max |grad| {scale:.3e}  max abs error {err:.1e}");
    }
    Ok(())
}

//! Masks scale whole heads and FFN channels. A zero head mask gives the
//! same logits as deleting that head's weights; a mask of 0.5 lies exactly
//! halfway between on/off in the attention output.
//!
//!     cargo run --example masked_forward

use maskprune::model::{forward_lm, MaskSet, ModelConfig, ModelParams};
use maskprune::prune::{materialize, PrunePlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn main() -> maskprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        seq_len: 16,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tokens: Vec<usize> = b"masked forward!!".iter().map(|&b| b as usize).collect();

    let dense = forward_lm(&cfg, &params, None, None, &tokens)?;
    let ones = forward_lm(&cfg, &params, Some(&MaskSet::ones(&cfg)), None, &tokens)?;
    println!(
        "all-ones masks vs dense:      {:.1e}",
        max_diff(dense.logits.data(), ones.logits.data())
    );

    let mut masks = MaskSet::ones(&cfg);
    masks.head[1][2] = 0.0;
    masks.inter[0][7] = 0.0;
    let masked = forward_lm(&cfg, &params, Some(&masks), None, &tokens)?;
    let mut plan = PrunePlan::empty(cfg.n_layers);
    plan.head[1].push(2);
    plan.inter[0].push(7);
    // materialize needs uniform counts, so drop the same units in every layer
    plan.head[0].push(2);
    plan.inter[1].push(7);
    masks.head[0][2] = 0.0;
    masks.inter[1][7] = 0.0;
    let masked_uniform = forward_lm(&cfg, &params, Some(&masks), None, &tokens)?;
    let (small, small_cfg) = materialize(&cfg, &params, &plan)?;
    let excised = forward_lm(&small_cfg, &small, None, None, &tokens)?;
    println!(
        "zeroed units vs excised units: {:.1e} ({} -> {} heads, {} -> {} channels)",
        max_diff(masked_uniform.logits.data(), excised.logits.data()),
        cfg.n_heads,
        small_cfg.n_heads,
        cfg.d_ffn,
        small_cfg.d_ffn
    );
    println!(
        "one zeroed head moves the logits by {:.3}",
        max_diff(dense.logits.data(), masked.logits.data())
    );
    Ok(())
}

//! Distillation loss between a teacher and a masked student: KL of the
//! output distributions plus alpha times the summed per-layer hidden MSE.
//! It is zero for the unmasked student and grows as more heads are masked.
//!
//!     cargo run --example distill_loss

use maskprune::model::{forward_lm, MaskSet, ModelConfig, ModelParams};
use maskprune::objective::{distill_loss, DistillConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maskprune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        seq_len: 32,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let tokens: Vec<usize> = b"the quick brown fox jumps over t"
        .iter()
        .map(|&b| b as usize)
        .collect();
    let teacher = forward_lm(&cfg, &params, None, None, &tokens)?;
    let dc = DistillConfig::default();

    let mut masks = MaskSet::ones(&cfg);
    println!(
        "{:>12} {:>12} {:>12} {:>12}",
        "heads off", "total", "kl", "layer mse"
    );
    for off in 0..=cfg.n_heads {
        if off > 0 {
            for row in &mut masks.head {
                row[off - 1] = 0.0;
            }
        }
        let student = forward_lm(&cfg, &params, Some(&masks), None, &tokens)?;
        let parts = distill_loss(&student, &teacher, &dc, None)?;
        println!(
            "{off:>12} {:>12.3e} {:>12.3e} {:>12.3e}",
            parts.total, parts.kl, parts.layer_mse
        );
    }
    Ok(())
}

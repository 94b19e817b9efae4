//! From trained masks to a smaller dense model: pick the `ceil(s)` smallest
//! units per layer, fold masks and LoRA into the weights, slice out the
//! pruned rows and columns, and check the logits did not move.
//!
//!     cargo run --release --example materialize -- [state.json]
//!
//! Without an argument a random model with planted masks is used.

use maskprune::harness::ModelRef;
use maskprune::model::{Checkpoint, MaskSet, ModelConfig, ModelParams};
use maskprune::prune::{prune_model, random_batches, verify_equivalence};
use maskprune::sparsity::SparsityState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> maskprune::Result<()> {
    let (cfg, params, masks, lora, sparsity) = match std::env::args().nth(1) {
        Some(path) => {
            let ck = Checkpoint::load(path.as_ref())?;
            let params = ck.params()?;
            let masks = ck.masks.expect("checkpoint without masks");
            (
                ck.config,
                params,
                masks,
                ck.lora,
                ck.sparsity.expect("checkpoint without s"),
            )
        }
        None => {
            let cfg = ModelConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = ModelParams::init(&cfg, &mut rng)?;
            let mut masks = MaskSet::ones(&cfg);
            for row in masks.head.iter_mut().chain(&mut masks.inter) {
                for v in row.iter_mut() {
                    *v = rng.random_range(0.2..1.0);
                }
            }
            for l in 0..cfg.n_layers {
                masks.head[l][l % cfg.n_heads] = 0.0;
                for c in 0..80 {
                    masks.inter[l][(7 * c + l) % cfg.d_ffn] = 0.0;
                }
            }
            let s = SparsityState {
                s_head: 0.9,
                s_inter: 79.5,
                ..SparsityState::default()
            };
            (cfg, params, masks, None, s)
        }
    };
    let pruned = prune_model(&cfg, &params, &masks, &sparsity, lora.as_ref())?;
    let sc = &pruned.small_cfg;
    println!(
        "heads {} -> {}, channels {} -> {}, prunable params {} -> {}",
        cfg.n_heads,
        sc.n_heads,
        cfg.d_ffn,
        sc.d_ffn,
        cfg.prunable_params(),
        sc.prunable_params()
    );
    let batches = random_batches(&cfg, 8, cfg.seq_len, 0);
    let masked = ModelRef {
        cfg: &cfg,
        params: &params,
        masks: Some(&pruned.zeroed),
        lora: lora.as_ref(),
    };
    let fused = ModelRef::dense(&cfg, &pruned.fused);
    let small = ModelRef::dense(sc, &pruned.small);
    println!(
        "masked vs fused:   {:.2e}",
        verify_equivalence(masked, fused, &batches)?
    );
    println!(
        "fused vs excised:  {:.2e}",
        verify_equivalence(fused, small, &batches)?
    );
    Ok(())
}

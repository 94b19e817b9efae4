//! Minimax mask training on a pretrained teacher, then pruning and a
//! comparison with one-shot magnitude pruning.
//!
//!     cargo run --release --example pretrain_teacher -- teacher.json
//!     cargo run --release --example minimax_prune -- teacher.json iterations=600 eta1=0.05

use std::path::PathBuf;
use std::time::Instant;

use maskprune::harness::{eval_ppl, magnitude_prune, ExperimentConfig, ModelRef};
use maskprune::minimax::{multiplier_report, Trainer};
use maskprune::model::{Checkpoint, UnitKind};
use maskprune::prune::prune_model;

fn main() -> maskprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let teacher = PathBuf::from(args.next().unwrap_or_else(|| "teacher.json".into()));
    let overrides: Vec<String> = args.collect();
    let mut exp = ExperimentConfig::default();
    exp.run.batch_size = 4;
    exp.run.window = 64;
    exp.apply_overrides(&overrides)?;

    let ck = Checkpoint::load(&teacher)?;
    let (cfg, params) = (ck.config.clone(), ck.params()?);
    let corpus = exp.data.corpus()?;
    let trainer = Trainer::new(&cfg, &params, exp.run.clone())?;
    let every = (exp.run.iterations / 20).max(1);
    let start = Instant::now();
    let out = trainer.run_with(corpus.train(), |r| {
        if r.iteration % every == 0 {
            let max_head = r.head_mass.iter().cloned().fold(0.0, f64::max).sqrt();
            let max_inter = r.inter_mass.iter().cloned().fold(0.0, f64::max).sqrt();
            println!(
                "t {:5} loss {:.4} s ({:.2}, {:6.2}) y {:8.3} z {:.3e} gap {:9.0} |m| ({:.1e}, {:.1e}) {:.0}s",
                r.iteration,
                r.loss,
                r.s_head,
                r.s_inter,
                r.y,
                r.z,
                r.resource - trainer.rm.budget,
                max_head,
                max_inter,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("{}", out.status.describe());
    println!(
        "{:?}",
        multiplier_report(&out.trace, trainer.rm.budget, 100)
    );

    let st = &out.state;
    let pruned = prune_model(&cfg, &params, &st.masks, &st.sparsity, Some(&st.lora))?;
    let w = cfg.seq_len;
    let dense = eval_ppl(ModelRef::dense(&cfg, &params), corpus.eval(), w)?;
    let ours = eval_ppl(
        ModelRef::dense(&pruned.small_cfg, &pruned.small),
        corpus.eval(),
        w,
    )?;
    let (hk, ik) = (
        st.sparsity.count(UnitKind::Head),
        st.sparsity.count(UnitKind::Inter),
    );
    let (_, mag, mag_cfg) = magnitude_prune(&cfg, &params, hk, ik)?;
    let magnitude = eval_ppl(ModelRef::dense(&mag_cfg, &mag), corpus.eval(), w)?;
    println!(
        "removed {hk} heads and {ik} channels per layer; eval ppl dense {dense:.3}, minimax {ours:.3}, magnitude {magnitude:.3}"
    );
    Ok(())
}

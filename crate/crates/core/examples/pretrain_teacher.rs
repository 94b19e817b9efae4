//! Pretrain a dense toy teacher on the synthetic corpus and save it.
//!
//!     cargo run --release --example pretrain_teacher -- [out.json] [steps]

use std::path::PathBuf;
use std::time::Instant;

use maskprune::harness::{pretrain_with, Corpus, PretrainConfig};
use maskprune::model::{Checkpoint, ModelConfig};

fn main() -> maskprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "teacher.json".into()));
    let mut pc = PretrainConfig::default();
    if let Some(steps) = args.next() {
        pc.steps = steps.parse().expect("steps must be an integer");
    }
    let cfg = ModelConfig::default();
    let corpus = Corpus::synthetic(200_000, 0, 0.1)?;
    let start = Instant::now();
    let (params, report) = pretrain_with(&cfg, &corpus, &pc, |step, loss| {
        if step % 50 == 0 {
            println!(
                "step {step:5}  loss {loss:.4}  ({:.1}s)",
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "eval perplexity {:.3} -> {:.3} in {:.1}s",
        report.untrained_ppl,
        report.final_ppl,
        start.elapsed().as_secs_f64()
    );
    Checkpoint::new(&cfg, &params).save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

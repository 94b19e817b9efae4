//! Effect of the FFN prox cadence: prune with `interval_start` in {1, 10, 50}
//! over a few seeds and report the median final distillation loss and the
//! cross-layer spread of FFN mask mass along the way.
//!
//!     cargo run --release --example interval_sweep -- teacher.json [iterations]

use maskprune::harness::{sweep, ExperimentConfig, SweepParam};
use maskprune::model::Checkpoint;

fn main() -> maskprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let teacher = args.next().unwrap_or_else(|| "teacher.json".into());
    let mut exp = ExperimentConfig::default();
    exp.run.batch_size = 4;
    exp.run.window = 64;
    if let Some(it) = args.next() {
        exp.run.iterations = it.parse().expect("iterations must be an integer");
    }
    let ck = Checkpoint::load(teacher.as_ref())?;
    let params = ck.params()?;
    let corpus = exp.data.corpus()?;
    let values = [1.0, 10.0, 50.0];
    let report = sweep(
        &ck.config,
        &params,
        &corpus,
        &exp.run,
        SweepParam::IntervalStart,
        &values,
        &[0, 1, 2],
    )?;
    for v in values {
        let runs: Vec<_> = report.entries.iter().filter(|e| e.value == v).collect();
        let peak = runs
            .iter()
            .flat_map(|e| e.inter_width_var.iter().copied())
            .fold(0.0, f64::max);
        match report.median_tail_loss(v) {
            Some(l) => println!(
                "interval_start {v:>3}: median final loss {l:.4}, peak FFN mass variance {peak:.3e}"
            ),
            None => println!("interval_start {v:>3}: every run failed"),
        }
    }
    Ok(())
}

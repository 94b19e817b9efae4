//! Mask value histograms of a pruning run (`state.json` from `prune`),
//! showing how far the masks have polarised to 0 and 1.
//!
//!     cargo run --release --example mask_stats -- out/state.json

use maskprune::harness::{mask_stats, MaskStats};
use maskprune::model::{Checkpoint, UnitKind};

fn bar(n: usize, total: usize) -> String {
    "#".repeat((40 * n).div_ceil(total.max(1)))
}

fn show(st: &MaskStats, kind: UnitKind) {
    let layers: Vec<_> = st.layers.iter().filter(|s| s.kind == kind).collect();
    let n_bins = layers[0].histogram.len();
    let total: usize = layers
        .iter()
        .map(|s| s.histogram.iter().sum::<usize>())
        .sum();
    println!(
        "{} masks ({} units over {} layers)",
        kind.name(),
        total,
        layers.len()
    );
    for b in 0..n_bins {
        let n: usize = layers.iter().map(|s| s.histogram[b]).sum();
        if n > 0 {
            println!(
                "  {:.2} {:5} {}",
                b as f64 / (n_bins - 1) as f64,
                n,
                bar(n, total)
            );
        }
    }
    for s in &layers {
        println!(
            "  layer {}: mean {:.3}, {} retained",
            s.layer, s.mean, s.retained
        );
    }
}

fn main() -> maskprune::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/state.json".into());
    let ck = Checkpoint::load(path.as_ref())?;
    let masks = ck.masks.expect("checkpoint carries no masks");
    let st = mask_stats(&masks);
    show(&st, UnitKind::Head);
    show(&st, UnitKind::Inter);
    Ok(())
}

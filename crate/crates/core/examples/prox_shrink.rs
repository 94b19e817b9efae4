//! The proximal step on one mask vector: only the `ceil(s)` smallest entries
//! shrink, by `1 / (1 + 2 eta1 y)`; repeated steps drive them to zero while
//! the rest stay put.
//!
//!     cargo run --example prox_shrink

use maskprune::sparsity::{ceil_count, prox, smallest_k_indices};

fn main() -> maskprune::Result<()> {
    let mut m = vec![0.9, 0.15, 0.6, 0.05, 1.0, 0.3];
    let (s, eta1, y) = (2.4, 5.0, 0.4);
    let k = ceil_count(s);
    println!(
        "s = {s} -> shrink the {k} smallest, factor {:.3}",
        1.0 / (1.0 + 2.0 * eta1 * y)
    );
    println!("smallest: {:?}", smallest_k_indices(&m, k)?);
    for step in 0..=6 {
        let row: Vec<String> = m.iter().map(|v| format!("{v:.4}")).collect();
        println!("step {step}: [{}]", row.join(", "));
        m = prox(&m, s, eta1, y)?;
    }
    Ok(())
}

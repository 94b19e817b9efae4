use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics for one iteration. Loss terms are measured before the update,
/// everything else after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss: f64,
    pub kl: f64,
    pub layer_mse: f64,
    pub lm_loss: f64,
    pub s_head: f64,
    pub s_inter: f64,
    /// The s-gradients used in this iteration's update.
    pub grad_s_head: f64,
    pub grad_s_inter: f64,
    pub y: f64,
    pub z: f64,
    pub resource: f64,
    pub interval: usize,
    pub inter_prox: bool,
    /// Smallest-`ceil(s)` squared mask mass per layer.
    pub head_mass: Vec<f64>,
    pub inter_mass: Vec<f64>,
    /// Cross-layer variance of retained unit counts.
    pub head_width_var: f64,
    pub inter_width_var: f64,
}

impl StepRecord {
    pub fn sparsity_mass(&self) -> f64 {
        self.head_mass.iter().chain(&self.inter_mass).sum()
    }
}

/// Multiplier behaviour over a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierReport {
    pub y_non_decreasing: bool,
    pub z_non_negative: bool,
    /// `z == 0` at every iteration preceded by `window` consecutive
    /// iterations (itself included) with `M(s) <= budget`.
    pub z_released: bool,
    /// Iterations at which the release condition was violated.
    pub release_violations: usize,
    /// First iteration with `M(s) <= budget`, if any.
    pub first_feasible: Option<usize>,
}

impl MultiplierReport {
    pub fn ok(&self) -> bool {
        self.y_non_decreasing && self.z_non_negative && self.z_released
    }
}

pub fn multiplier_report(trace: &[StepRecord], budget: f64, window: usize) -> MultiplierReport {
    let y_non_decreasing = trace.windows(2).all(|w| w[1].y >= w[0].y);
    let z_non_negative = trace.iter().all(|r| r.z >= 0.0);
    let mut run = 0;
    let mut violations = 0;
    for r in trace {
        run = if r.resource <= budget { run + 1 } else { 0 };
        if run >= window && r.z != 0.0 {
            violations += 1;
        }
    }
    MultiplierReport {
        y_non_decreasing,
        z_non_negative,
        z_released: violations == 0,
        release_violations: violations,
        first_feasible: trace
            .iter()
            .find(|r| r.resource <= budget)
            .map(|r| r.iteration),
    }
}

pub fn write_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let layers = trace.first().map_or(0, |r| r.head_mass.len());
    let mut header: Vec<String> = [
        "iteration",
        "loss",
        "kl",
        "layer_mse",
        "lm_loss",
        "s_head",
        "s_inter",
        "grad_s_head",
        "grad_s_inter",
        "y",
        "z",
        "resource",
        "interval",
        "inter_prox",
        "head_width_var",
        "inter_width_var",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..layers).map(|l| format!("head_mass_l{l}")));
    header.extend((0..layers).map(|l| format!("inter_mass_l{l}")));
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.iteration.to_string(),
            r.loss.to_string(),
            r.kl.to_string(),
            r.layer_mse.to_string(),
            r.lm_loss.to_string(),
            r.s_head.to_string(),
            r.s_inter.to_string(),
            r.grad_s_head.to_string(),
            r.grad_s_inter.to_string(),
            r.y.to_string(),
            r.z.to_string(),
            r.resource.to_string(),
            r.interval.to_string(),
            u8::from(r.inter_prox).to_string(),
            r.head_width_var.to_string(),
            r.inter_width_var.to_string(),
        ];
        row.extend(r.head_mass.iter().map(f64::to_string));
        row.extend(r.inter_mass.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_trace_json(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let text = serde_json::to_string(trace)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

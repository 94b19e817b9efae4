use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskSet, UnitKind};
use crate::sparsity::ACTIVE_MASK_THRESHOLD;

pub const BIN_WIDTH: f64 = 0.05;
pub const N_BINS: usize = 21;

/// Value distribution of one layer's masks of one kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub kind: UnitKind,
    pub layer: usize,
    pub mean: f64,
    /// Entries above the active threshold.
    pub retained: usize,
    /// Counts per bin; bin `b` collects values with `round(v / 0.05) == b`.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub layers: Vec<LayerStats>,
}

fn bin(v: f64) -> usize {
    ((v / BIN_WIDTH).round().max(0.0) as usize).min(N_BINS - 1)
}

pub fn mask_stats(masks: &MaskSet) -> MaskStats {
    let mut layers = Vec::new();
    for kind in UnitKind::BOTH {
        for (layer, row) in masks.get(kind).iter().enumerate() {
            let mut histogram = vec![0; N_BINS];
            for &v in row {
                histogram[bin(v)] += 1;
            }
            layers.push(LayerStats {
                kind,
                layer,
                mean: row.iter().sum::<f64>() / row.len().max(1) as f64,
                retained: row.iter().filter(|&&v| v > ACTIVE_MASK_THRESHOLD).count(),
                histogram,
            });
        }
    }
    MaskStats { layers }
}

impl MaskStats {
    /// Totals over layers of `kind`: mass in the lowest bin, the top bin and
    /// strictly between.
    pub fn extremes(&self, kind: UnitKind) -> (usize, usize, usize) {
        let mut out = (0, 0, 0);
        for s in self.layers.iter().filter(|s| s.kind == kind) {
            out.0 += s.histogram[0];
            out.1 += s.histogram[N_BINS - 1];
            out.2 += s.histogram[1..N_BINS - 1].iter().sum::<usize>();
        }
        out
    }
}

/// `kind,layer,unit,value`, one row per mask entry.
pub fn write_mask_values(path: &Path, masks: &MaskSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["kind", "layer", "unit", "value"])?;
    for kind in UnitKind::BOTH {
        for (l, row) in masks.get(kind).iter().enumerate() {
            for (u, v) in row.iter().enumerate() {
                w.write_record([kind.name(), &l.to_string(), &u.to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `kind,layer,bin_center,count,mean,retained`, one row per non-empty bin.
pub fn write_mask_histograms(path: &Path, stats: &MaskStats) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["kind", "layer", "bin_center", "count", "mean", "retained"])?;
    for s in &stats.layers {
        for (b, &count) in s.histogram.iter().enumerate().filter(|(_, &c)| c > 0) {
            w.write_record([
                s.kind.name().to_string(),
                s.layer.to_string(),
                format!("{:.2}", b as f64 * BIN_WIDTH),
                count.to_string(),
                s.mean.to_string(),
                s.retained.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `mask_stats.csv` and `mask_hist.csv` into `dir`.
pub fn export_mask_stats(dir: &Path, masks: &MaskSet) -> Result<MaskStats> {
    let stats = mask_stats(masks);
    write_mask_values(&dir.join("mask_stats.csv"), masks)?;
    write_mask_histograms(&dir.join("mask_hist.csv"), &stats)?;
    Ok(stats)
}

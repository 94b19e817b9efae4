//! Constraint math: smallest-k subvector norms, the resource model, the
//! proximal shrink and straight-through gradients for the sparsity levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskSet, ModelConfig, UnitKind};

/// Mask entries below this count as removed when measuring sparsity.
pub const ZERO_MASK_THRESHOLD: f64 = 1e-9;

/// Mask entries above this count as retained units.
pub const ACTIVE_MASK_THRESHOLD: f64 = 1e-3;

/// Sparsity levels and Lagrange multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityState {
    pub s_head: f64,
    pub s_inter: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for SparsityState {
    fn default() -> Self {
        SparsityState {
            s_head: 0.0,
            s_inter: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }
}

impl SparsityState {
    pub fn s(&self, kind: UnitKind) -> f64 {
        match kind {
            UnitKind::Head => self.s_head,
            UnitKind::Inter => self.s_inter,
        }
    }

    pub fn s_mut(&mut self, kind: UnitKind) -> &mut f64 {
        match kind {
            UnitKind::Head => &mut self.s_head,
            UnitKind::Inter => &mut self.s_inter,
        }
    }

    /// `ceil(s)` for the given group: the number of units it removes.
    pub fn count(&self, kind: UnitKind) -> usize {
        ceil_count(self.s(kind))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for kind in UnitKind::BOTH {
            let s = self.s(kind);
            let hi = (kind.width(cfg) - 1) as f64;
            if !(0.0..=hi).contains(&s) {
                return Err(Error::OutOfRange(format!(
                    "s_{kind} = {s} not in [0, {hi}]"
                )));
            }
        }
        for (name, v) in [("y", self.y), ("z", self.z)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::OutOfRange(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// `ceil(s)` as a count; non-positive `s` gives 0.
pub fn ceil_count(s: f64) -> usize {
    if s <= 0.0 {
        0
    } else {
        s.ceil() as usize
    }
}

/// Parameter budget of the prunable projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceModel {
    /// `M`: prunable parameters of the dense model.
    pub total: usize,
    /// `M_prune`: the target budget.
    pub budget: f64,
    pub head_cost: usize,
    pub channel_cost: usize,
    pub n_layers: usize,
}

impl ResourceModel {
    /// Budget `(1 - target_sparsity) * M`.
    pub fn new(cfg: &ModelConfig, target_sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity {target_sparsity} not in [0, 1)"
            )));
        }
        let total = cfg.prunable_params();
        Self::with_budget(cfg, (1.0 - target_sparsity) * total as f64)
    }

    pub fn with_budget(cfg: &ModelConfig, budget: f64) -> Result<Self> {
        let total = cfg.prunable_params();
        if !(budget > 0.0 && budget <= total as f64) {
            return Err(Error::Config(format!(
                "budget {budget} must lie in (0, {total}]"
            )));
        }
        Ok(ResourceModel {
            total,
            budget,
            head_cost: cfg.head_cost(),
            channel_cost: cfg.channel_cost(),
            n_layers: cfg.n_layers,
        })
    }

    pub fn cost(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Head => self.head_cost,
            UnitKind::Inter => self.channel_cost,
        }
    }
}

/// `M(s) = M - L (head_cost s_head + channel_cost s_inter)` with continuous `s`.
pub fn resource(rm: &ResourceModel, s: &SparsityState) -> f64 {
    rm.total as f64
        - rm.n_layers as f64 * (rm.head_cost as f64 * s.s_head + rm.channel_cost as f64 * s.s_inter)
}

/// Straight-through gradient of `z (M(s) - M_prune)` with respect to `s`.
pub fn grad_s_resource(rm: &ResourceModel, z: f64, kind: UnitKind) -> f64 {
    -z * (rm.n_layers * rm.cost(kind)) as f64
}

/// Positions of the `k` entries of smallest magnitude, ordered by magnitude
/// with ties going to the lower index.
pub fn smallest_k_indices(m: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > m.len() {
        return Err(Error::OutOfRange(format!(
            "k = {k} for a vector of {}",
            m.len()
        )));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&a, &b| m[a].abs().total_cmp(&m[b].abs()));
    order.truncate(k);
    Ok(order)
}

/// Squared norm of the `k` smallest-magnitude entries, and their positions
/// in ascending index order.
pub fn smallest_k_sqnorm(m: &[f64], k: usize) -> Result<(f64, Vec<usize>)> {
    let mut idx = smallest_k_indices(m, k)?;
    let value = idx.iter().map(|&i| m[i] * m[i]).sum();
    idx.sort_unstable();
    Ok((value, idx))
}

/// Fraction of `total` prunable parameters whose head or channel mask is zero.
pub fn actual_sparsity(masks: &MaskSet, cfg: &ModelConfig, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument(
            "total parameter count is zero".into(),
        ));
    }
    let zeros = |rows: &[Vec<f64>]| {
        rows.iter()
            .flatten()
            .filter(|v| v.abs() < ZERO_MASK_THRESHOLD)
            .count()
    };
    let removed = cfg.head_cost() * zeros(&masks.head) + cfg.channel_cost() * zeros(&masks.inter);
    Ok(removed as f64 / total as f64)
}

/// Smallest-`ceil(s)` squared mass of one mask group, summed over layers.
pub fn group_mass(masks: &MaskSet, s: &SparsityState, kind: UnitKind) -> Result<f64> {
    let k = s.count(kind);
    masks
        .get(kind)
        .iter()
        .map(|row| smallest_k_sqnorm(row, k.min(row.len())).map(|(v, _)| v))
        .sum()
}

/// `y * sum_l (|m_head^l|^2_{ceil s_head} + |m_inter^l|^2_{ceil s_inter})`.
pub fn sparsity_loss(masks: &MaskSet, s: &SparsityState) -> Result<f64> {
    if s.y == 0.0 {
        return Ok(0.0);
    }
    Ok(s.y * (group_mass(masks, s, UnitKind::Head)? + group_mass(masks, s, UnitKind::Inter)?))
}

/// Proximal step for `eta1 * y * |m|^2_{ceil s}`: the `ceil(s)` smallest
/// entries are divided by `1 + 2 eta1 y`, the rest pass through.
pub fn prox(m_bar: &[f64], s: f64, eta1: f64, y: f64) -> Result<Vec<f64>> {
    if s < 0.0 || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sparsity level {s} must be >= 0"
        )));
    }
    if eta1 < 0.0 || y < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prox needs eta1 >= 0 and y >= 0, got {eta1} and {y}"
        )));
    }
    let k = ceil_count(s).min(m_bar.len());
    let shrink = 1.0 / (1.0 + 2.0 * eta1 * y);
    let mut out = m_bar.to_vec();
    for i in smallest_k_indices(m_bar, k)? {
        out[i] *= shrink;
    }
    Ok(out)
}

/// Straight-through proxy for `d |m|^2_{s} / ds`: the square of the
/// `min(dim, ceil(s) + 1)`-th smallest entry.
pub fn grad_s_sparsity(m: &[f64], s: f64) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("empty mask vector".into()));
    }
    if s < 0.0 || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sparsity level {s} must be >= 0"
        )));
    }
    let pos = (ceil_count(s) + 1).min(m.len());
    let order = smallest_k_indices(m, pos)?;
    let v = m[order[pos - 1]];
    Ok(v * v)
}

//! Turning trained masks into a smaller dense model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ModelRef;
use crate::model::{LoraSet, MaskSet, ModelConfig, ModelParams, UnitKind};
use crate::sparsity::{smallest_k_sqnorm, SparsityState, ZERO_MASK_THRESHOLD};

/// Units removed from every layer. Indices are ascending within a layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    pub head: Vec<Vec<usize>>,
    pub inter: Vec<Vec<usize>>,
}

impl PrunePlan {
    pub fn empty(n_layers: usize) -> Self {
        PrunePlan {
            head: vec![Vec::new(); n_layers],
            inter: vec![Vec::new(); n_layers],
        }
    }

    /// Per layer, the `counts` entries of lowest score (ties to the lower index).
    pub fn from_scores(
        head_scores: &[Vec<f64>],
        inter_scores: &[Vec<f64>],
        head_count: usize,
        inter_count: usize,
    ) -> Result<Self> {
        let pick = |rows: &[Vec<f64>], k: usize, kind: UnitKind| -> Result<Vec<Vec<usize>>> {
            rows.iter()
                .map(|row| {
                    if k >= row.len() {
                        return Err(Error::OutOfRange(format!(
                            "removing {k} of {} {kind} units would empty a layer",
                            row.len()
                        )));
                    }
                    smallest_k_sqnorm(row, k).map(|(_, idx)| idx)
                })
                .collect()
        };
        Ok(PrunePlan {
            head: pick(head_scores, head_count, UnitKind::Head)?,
            inter: pick(inter_scores, inter_count, UnitKind::Inter)?,
        })
    }

    pub fn get(&self, kind: UnitKind) -> &[Vec<usize>] {
        match kind {
            UnitKind::Head => &self.head,
            UnitKind::Inter => &self.inter,
        }
    }

    /// Removal count of `kind`, or an error when layers disagree.
    pub fn count(&self, kind: UnitKind) -> Result<usize> {
        let rows = self.get(kind);
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Structure(format!(
                "{kind} removal counts differ across layers"
            )));
        }
        Ok(k)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for kind in UnitKind::BOTH {
            let rows = self.get(kind);
            if rows.len() != cfg.n_layers {
                return Err(Error::Structure(format!(
                    "plan covers {} layers, model has {}",
                    rows.len(),
                    cfg.n_layers
                )));
            }
            let width = kind.width(cfg);
            if self.count(kind)? >= width {
                return Err(Error::Structure(format!(
                    "plan removes every {kind} unit of a layer"
                )));
            }
            for (l, row) in rows.iter().enumerate() {
                if row.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Structure(format!(
                        "layer {l} {kind} indices must be strictly ascending"
                    )));
                }
                if let Some(&bad) = row.iter().find(|&&i| i >= width) {
                    return Err(Error::Structure(format!(
                        "layer {l} {kind} index {bad} out of {width}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Indices each layer keeps.
    pub fn kept(&self, kind: UnitKind, layer: usize, width: usize) -> Vec<usize> {
        let drop = &self.get(kind)[layer];
        (0..width)
            .filter(|i| drop.binary_search(i).is_err())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per layer, the `ceil(s)` heads and channels with the smallest masks.
pub fn select_pruned(masks: &MaskSet, sparsity: &SparsityState) -> Result<PrunePlan> {
    PrunePlan::from_scores(
        &masks.head,
        &masks.inter,
        sparsity.count(UnitKind::Head),
        sparsity.count(UnitKind::Inter),
    )
}

/// Masks with every planned unit set to exactly zero.
pub fn hard_zero(masks: &MaskSet, plan: &PrunePlan) -> MaskSet {
    let mut out = masks.clone();
    for kind in UnitKind::BOTH {
        for (row, drop) in out.get_mut(kind).iter_mut().zip(plan.get(kind)) {
            for &i in drop {
                row[i] = 0.0;
            }
        }
    }
    out
}

/// Units outside the plan whose mask is already numerically zero. Non-zero
/// means the optimiser pruned more than `ceil(s)` in some layer.
pub fn unplanned_zeros(masks: &MaskSet, plan: &PrunePlan) -> usize {
    UnitKind::BOTH
        .iter()
        .flat_map(|&kind| masks.get(kind).iter().zip(plan.get(kind)))
        .map(|(row, drop)| {
            row.iter()
                .enumerate()
                .filter(|(i, v)| v.abs() < ZERO_MASK_THRESHOLD && drop.binary_search(i).is_err())
                .count()
        })
        .sum()
}

/// Folds adapters and masks into plain weights: each head's block of `W_V`
/// columns is scaled by its head mask and each `W_up` column by its channel
/// mask. A `W_gate` column is zeroed only where the channel mask is zero,
/// because scaling it would pass the mask through the SiLU.
pub fn fuse_masks(
    cfg: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    lora: Option<&LoraSet>,
) -> Result<ModelParams> {
    params.validate(cfg)?;
    masks.validate(cfg)?;
    let mut out = match lora {
        Some(l) => {
            l.validate(cfg)?;
            l.merge_into(params)?
        }
        None => params.clone(),
    };
    let hd = cfg.head_dim;
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let head_cols: Vec<f64> = masks.head[l]
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, hd))
            .collect();
        layer.wv = layer.wv.scale_cols(&head_cols)?;
        let inter = &masks.inter[l];
        layer.w_up = layer.w_up.scale_cols(inter)?;
        let gate: Vec<f64> = inter
            .iter()
            .map(|&m| if m == 0.0 { 0.0 } else { 1.0 })
            .collect();
        layer.w_gate = layer.w_gate.scale_cols(&gate)?;
    }
    Ok(out)
}

/// Slices the planned heads and channels out of every layer.
pub fn materialize(
    cfg: &ModelConfig,
    params: &ModelParams,
    plan: &PrunePlan,
) -> Result<(ModelParams, ModelConfig)> {
    params.validate(cfg)?;
    plan.validate(cfg)?;
    let hd = cfg.head_dim;
    let small_cfg = ModelConfig {
        n_heads: cfg.n_heads - plan.count(UnitKind::Head)?,
        d_ffn: cfg.d_ffn - plan.count(UnitKind::Inter)?,
        ..cfg.clone()
    };
    small_cfg.validate()?;
    let mut out = params.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let heads = plan.kept(UnitKind::Head, l, cfg.n_heads);
        let attn: Vec<usize> = heads.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
        layer.wq = layer.wq.select_cols(&attn)?;
        layer.wk = layer.wk.select_cols(&attn)?;
        layer.wv = layer.wv.select_cols(&attn)?;
        layer.wo = layer.wo.select_rows(&attn)?;
        let chans = plan.kept(UnitKind::Inter, l, cfg.d_ffn);
        layer.w_gate = layer.w_gate.select_cols(&chans)?;
        layer.w_up = layer.w_up.select_cols(&chans)?;
        layer.w_down = layer.w_down.select_rows(&chans)?;
    }
    out.validate(&small_cfg)?;
    Ok((out, small_cfg))
}

/// Largest absolute logit difference between two models over `batches`.
pub fn verify_equivalence(a: ModelRef<'_>, b: ModelRef<'_>, batches: &[Vec<usize>]) -> Result<f64> {
    let (ca, cb) = (a.cfg, b.cfg);
    if ca.n_layers != cb.n_layers
        || ca.d_hidden != cb.d_hidden
        || ca.head_dim != cb.head_dim
        || ca.vocab_size != cb.vocab_size
    {
        return Err(Error::Structure(
            "models differ in depth, width, head size or vocabulary".into(),
        ));
    }
    let seqs: Vec<&[usize]> = batches.iter().map(Vec::as_slice).collect();
    let la = a.logits(&seqs)?;
    let lb = b.logits(&seqs)?;
    la.iter()
        .zip(&lb)
        .map(|(x, y)| x.max_abs_diff(y))
        .try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
}

/// Convenience: the whole pipeline from trained state to a small model.
pub struct Pruned {
    pub plan: PrunePlan,
    pub fused: ModelParams,
    pub small: ModelParams,
    pub small_cfg: ModelConfig,
    /// Masks with the planned units hard-zeroed, as compared against.
    pub zeroed: MaskSet,
    pub unplanned_zeros: usize,
}

pub fn prune_model(
    cfg: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    sparsity: &SparsityState,
    lora: Option<&LoraSet>,
) -> Result<Pruned> {
    let plan = select_pruned(masks, sparsity)?;
    let extra = unplanned_zeros(masks, &plan);
    if extra > 0 {
        log::warn!("{extra} units outside the prune plan already have zero masks");
    }
    let zeroed = hard_zero(masks, &plan);
    let fused = fuse_masks(cfg, params, &zeroed, lora)?;
    let (small, small_cfg) = materialize(cfg, &fused, &plan)?;
    Ok(Pruned {
        plan,
        fused,
        small,
        small_cfg,
        zeroed,
        unplanned_zeros: extra,
    })
}

/// Token windows for equivalence checks.
pub fn random_batches(cfg: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| rng.random_range(0..cfg.vocab_size))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            head_dim: 4,
            d_hidden: 16,
            d_ffn: 12,
            vocab_size: 32,
            seq_len: 12,
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // larger weights so that mistakes show up well above rounding
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        p
    }

    #[test]
    fn select_examples() {
        let s = SparsityState::default();
        let m = MaskSet::ones(&cfg());
        assert_eq!(select_pruned(&m, &s).unwrap(), PrunePlan::empty(2));

        let mut m = MaskSet::ones(&cfg());
        m.head[0] = vec![0.0, 0.8, 0.0, 0.9];
        m.head[1] = vec![0.3, 0.2, 0.1, 0.4];
        let s = SparsityState {
            s_head: 1.5,
            s_inter: 2.1,
            ..Default::default()
        };
        let plan = select_pruned(&m, &s).unwrap();
        assert_eq!(plan.head, vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(plan.count(UnitKind::Inter).unwrap(), 3);
        assert_eq!(plan.inter[0], vec![0, 1, 2]);
        plan.validate(&cfg()).unwrap();

        let s = SparsityState {
            s_head: 4.0,
            ..Default::default()
        };
        assert!(select_pruned(&m, &s).is_err());
    }

    #[test]
    fn plan_validation() {
        let c = cfg();
        let mut p = PrunePlan::empty(2);
        p.head = vec![vec![1], vec![]];
        assert!(p.validate(&c).is_err());
        p.head = vec![vec![2, 1], vec![0, 3]];
        assert!(p.validate(&c).is_err());
        p.head = vec![vec![1, 4], vec![0, 3]];
        assert!(p.validate(&c).is_err());
        p.head = vec![vec![0, 1, 2, 3]; 2];
        assert!(p.validate(&c).is_err());
        p.head = vec![vec![1, 2]; 2];
        p.validate(&c).unwrap();
        assert_eq!(p.kept(UnitKind::Head, 0, 4), vec![0, 3]);
    }

    #[test]
    fn fuse_identity_and_zero_channel() {
        let c = cfg();
        let p = params(&c, 1);
        assert_eq!(fuse_masks(&c, &p, &MaskSet::ones(&c), None).unwrap(), p);
        let mut m = MaskSet::ones(&c);
        m.inter[1][5] = 0.0;
        let f = fuse_masks(&c, &p, &m, None).unwrap();
        for r in 0..c.d_hidden {
            assert_eq!(f.layers[1].w_up.get2(r, 5), 0.0);
            assert_eq!(f.layers[1].w_gate.get2(r, 5), 0.0);
        }
    }

    #[test]
    fn fused_head_matches_masked_forward() {
        let c = cfg();
        let p = params(&c, 2);
        let mut m = MaskSet::ones(&c);
        m.head[1][2] = 0.7;
        m.inter[0][3] = 0.25;
        let f = fuse_masks(&c, &p, &m, None).unwrap();
        let toks = random_batches(&c, 3, c.seq_len, 9);
        let masked = ModelRef {
            masks: Some(&m),
            ..ModelRef::dense(&c, &p)
        };
        let diff = verify_equivalence(masked, ModelRef::dense(&c, &f), &toks).unwrap();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn materialized_count_matches_resource() {
        let c = cfg();
        let p = params(&c, 3);
        let mut plan = PrunePlan::empty(2);
        plan.head = vec![vec![0, 3], vec![1, 2]];
        plan.inter = vec![vec![0, 4, 7], vec![1, 2, 11]];
        let (small, sc) = materialize(&c, &p, &plan).unwrap();
        assert_eq!((sc.n_heads, sc.d_ffn), (2, 9));
        let removed = c.n_layers * (2 * c.head_cost() + 3 * c.channel_cost());
        assert_eq!(small.prunable_count(), p.prunable_count() - removed);
        let (same, _) = materialize(&c, &p, &PrunePlan::empty(2)).unwrap();
        assert_eq!(same, p);
    }
}

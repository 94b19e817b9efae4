use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::prune::{materialize, PrunePlan};

/// Per-layer head scores and per-layer channel scores.
pub type UnitScores = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Per-layer L2 norms of every weight belonging to each head (its `W_Q`,
/// `W_K`, `W_V` columns and `W_O` rows) and to each FFN channel (its `W_gate`
/// and `W_up` columns and `W_down` row).
pub fn magnitude_scores(cfg: &ModelConfig, params: &ModelParams) -> Result<UnitScores> {
    params.validate(cfg)?;
    let hd = cfg.head_dim;
    let mut heads = Vec::with_capacity(cfg.n_layers);
    let mut chans = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let col_sq = |w: &crate::diffcore::Tensor, j: usize| -> f64 {
            (0..w.rows()).map(|r| w.get2(r, j).powi(2)).sum()
        };
        let row_sq =
            |w: &crate::diffcore::Tensor, i: usize| -> f64 { w.row(i).iter().map(|v| v * v).sum() };
        heads.push(
            (0..cfg.n_heads)
                .map(|h| {
                    (h * hd..(h + 1) * hd)
                        .map(|j| {
                            col_sq(&layer.wq, j)
                                + col_sq(&layer.wk, j)
                                + col_sq(&layer.wv, j)
                                + row_sq(&layer.wo, j)
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        );
        chans.push(
            (0..cfg.d_ffn)
                .map(|c| {
                    (col_sq(&layer.w_gate, c) + col_sq(&layer.w_up, c) + row_sq(&layer.w_down, c))
                        .sqrt()
                })
                .collect(),
        );
    }
    Ok((heads, chans))
}

/// One-shot magnitude pruning to the same uniform structure: per layer, the
/// `n_heads` heads and `n_channels` channels of smallest weight norm go.
pub fn magnitude_prune(
    cfg: &ModelConfig,
    params: &ModelParams,
    n_heads: usize,
    n_channels: usize,
) -> Result<(PrunePlan, ModelParams, ModelConfig)> {
    let (h, c) = magnitude_scores(cfg, params)?;
    let plan = PrunePlan::from_scores(&h, &c, n_heads, n_channels)?;
    let (small, small_cfg) = materialize(cfg, params, &plan)?;
    Ok((plan, small, small_cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scores_follow_planted_norms() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            head_dim: 2,
            d_hidden: 4,
            d_ffn: 3,
            vocab_size: 8,
            seq_len: 4,
        };
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = &mut p.layers[0];
        for w in [
            &mut l.wq,
            &mut l.wk,
            &mut l.wv,
            &mut l.wo,
            &mut l.w_gate,
            &mut l.w_up,
            &mut l.w_down,
        ] {
            *w = Tensor::zeros(w.shape());
        }
        // head 1: a single entry of 3 in W_O row 2; channel 2: 1 + 4 + 4 = 3^2
        l.wo.data_mut()[2 * 4] = 3.0;
        l.w_gate.data_mut()[2] = 1.0;
        l.w_up.data_mut()[3 + 2] = 2.0;
        l.w_down.data_mut()[2 * 4 + 1] = 2.0;
        let (h, c) = magnitude_scores(&cfg, &p).unwrap();
        assert_eq!(h[0], vec![0.0, 3.0]);
        assert_eq!(c[0], vec![0.0, 0.0, 3.0]);
        let (plan, small, sc) = magnitude_prune(&cfg, &p, 1, 2).unwrap();
        assert_eq!(plan.head, vec![vec![0]]);
        assert_eq!(plan.inter, vec![vec![0, 1]]);
        assert_eq!((sc.n_heads, sc.d_ffn), (1, 1));
        assert_eq!(small.layers[0].w_down.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}

//! The decoder checked against a plain-loop reference implementation.

use maskprune::diffcore::Tensor;
use maskprune::model::{
    apply_lora, ffn_masked, forward_lm, mha_masked, Checkpoint, LayerParams, LoraAdapter, LoraSet,
    MaskSet, ModelConfig, ModelParams, Proj, RMS_EPS, ROPE_BASE,
};
use maskprune::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 3,
        head_dim: 4,
        d_hidden: 12,
        d_ffn: 10,
        vocab_size: 20,
        seq_len: 9,
    }
}

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn rms(x: &Mat, g: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter().zip(g).map(|(v, gg)| v * inv * gg).collect()
        })
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn weight(lp: &LayerParams, lora: Option<&LoraSet>, layer: usize, p: Proj) -> Mat {
    let mut w = to_mat(lp.proj(p));
    if let Some(ad) = lora.and_then(|s| s.layers[layer].get(&p)) {
        let delta = mm(&to_mat(&ad.b), &to_mat(&ad.a));
        for (r, dr) in w.iter_mut().zip(delta) {
            for (v, d) in r.iter_mut().zip(dr) {
                *v += d;
            }
        }
    }
    w
}

/// Attention summing only over `heads`, each scaled by its mask.
fn ref_mha(
    cfg: &ModelConfig,
    lp: &LayerParams,
    lora: Option<&LoraSet>,
    layer: usize,
    x: &Mat,
    mask: &[f64],
    heads: &[usize],
) -> Mat {
    let hd = cfg.head_dim;
    let (q, k, v) = (
        mm(x, &weight(lp, lora, layer, Proj::Q)),
        mm(x, &weight(lp, lora, layer, Proj::K)),
        mm(x, &weight(lp, lora, layer, Proj::V)),
    );
    let wo = weight(lp, lora, layer, Proj::O);
    let rot = |m: &Mat| -> Mat {
        let mut m = m.clone();
        for (t, row) in m.iter_mut().enumerate() {
            for h in 0..cfg.n_heads {
                for p in 0..hd / 2 {
                    let th = t as f64 * ROPE_BASE.powf(-2.0 * p as f64 / hd as f64);
                    let (a, b) = (row[h * hd + 2 * p], row[h * hd + 2 * p + 1]);
                    row[h * hd + 2 * p] = a * th.cos() - b * th.sin();
                    row[h * hd + 2 * p + 1] = a * th.sin() + b * th.cos();
                }
            }
        }
        m
    };
    let (q, k) = (rot(&q), rot(&k));
    let n = x.len();
    let mut out = vec![vec![0.0; cfg.d_hidden]; n];
    for &h in heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd)
                        .map(|c| q[i][h * hd + c] * k[j][h * hd + c])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut head_out = vec![0.0; hd];
            for (j, s) in scores.iter().enumerate() {
                let p = (s - mx).exp() / z;
                for c in 0..hd {
                    head_out[c] += p * v[j][h * hd + c];
                }
            }
            for o in 0..cfg.d_hidden {
                for c in 0..hd {
                    out[i][o] += mask[h] * head_out[c] * wo[h * hd + c][o];
                }
            }
        }
    }
    out
}

fn ref_ffn(
    lp: &LayerParams,
    lora: Option<&LoraSet>,
    layer: usize,
    x: &Mat,
    mask: &[f64],
    channels: &[usize],
) -> Mat {
    let g = mm(x, &weight(lp, lora, layer, Proj::Gate));
    let u = mm(x, &weight(lp, lora, layer, Proj::Up));
    let wd = weight(lp, lora, layer, Proj::Down);
    let d = wd[0].len();
    x.iter()
        .enumerate()
        .map(|(i, _)| {
            let mut row = vec![0.0; d];
            for &c in channels {
                let a = silu(g[i][c]) * u[i][c] * mask[c];
                for (o, r) in row.iter_mut().enumerate() {
                    *r += a * wd[c][o];
                }
            }
            row
        })
        .collect()
}

fn ref_forward(
    cfg: &ModelConfig,
    p: &ModelParams,
    masks: &MaskSet,
    lora: Option<&LoraSet>,
    tokens: &[usize],
) -> (Mat, Vec<Mat>) {
    let mut h: Mat = tokens.iter().map(|&t| p.embed.row(t).to_vec()).collect();
    let all_heads: Vec<usize> = (0..cfg.n_heads).collect();
    let all_ch: Vec<usize> = (0..cfg.d_ffn).collect();
    let mut hiddens = Vec::new();
    for (l, lp) in p.layers.iter().enumerate() {
        let x = rms(&h, lp.attn_norm.data());
        let a = ref_mha(cfg, lp, lora, l, &x, &masks.head[l], &all_heads);
        add_into(&mut h, &a);
        let x = rms(&h, lp.ffn_norm.data());
        let f = ref_ffn(lp, lora, l, &x, &masks.inter[l], &all_ch);
        add_into(&mut h, &f);
        hiddens.push(h.clone());
    }
    let x = rms(&h, p.final_norm.data());
    (mm(&x, &to_mat(&p.lm_head)), hiddens)
}

fn add_into(h: &mut Mat, d: &Mat) {
    for (r, dr) in h.iter_mut().zip(d) {
        for (v, x) in r.iter_mut().zip(dr) {
            *v += x;
        }
    }
}

fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    to_mat(t)
        .iter()
        .flatten()
        .zip(m.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn setup(seed: u64) -> (ModelConfig, ModelParams, LoraSet, ChaCha8Rng) {
    let cfg = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    // larger weights so attention patterns are far from uniform
    for layer in &mut params.layers {
        for p in Proj::ALL {
            let t = layer.proj_mut(p);
            *t = t.scale(10.0).unwrap();
        }
    }
    params.embed = params.embed.scale(20.0).unwrap();
    let mut lora = LoraSet::init(&cfg, 2, &Proj::ALL, &mut rng).unwrap();
    for layer in &mut lora.layers {
        for ad in layer.values_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.05, &mut rng);
        }
    }
    (cfg, params, lora, rng)
}

fn random_masks(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MaskSet {
    use rand::Rng;
    let mut m = MaskSet::ones(cfg);
    for v in m.head.iter_mut().chain(&mut m.inter).flatten() {
        *v = rng.random_range(0.0..1.0);
    }
    m
}

fn random_x(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, cfg.d_hidden], 1.0, rng)
}

#[test]
fn forward_matches_reference_decoder() {
    let (cfg, params, lora, mut rng) = setup(1);
    let masks = random_masks(&cfg, &mut rng);
    let tokens = [3, 0, 19, 7, 7, 12, 1];
    let out = forward_lm(&cfg, &params, Some(&masks), Some(&lora), &tokens).unwrap();
    let (logits, hiddens) = ref_forward(&cfg, &params, &masks, Some(&lora), &tokens);
    assert_eq!(out.logits.shape(), &[tokens.len(), cfg.vocab_size]);
    assert!(max_diff(&out.logits, &logits) < 1e-10);
    assert_eq!(out.hiddens.len(), cfg.n_layers);
    for (a, b) in out.hiddens.iter().zip(&hiddens) {
        assert!(max_diff(a, b) < 1e-10);
    }
}

#[test]
fn identity_masks_and_fresh_lora_are_bit_identical_to_dense() {
    let cfg = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(&cfg, &mut rng).unwrap();
    let lora = LoraSet::init(&cfg, 4, &Proj::ALL, &mut rng).unwrap();
    let masks = MaskSet::ones(&cfg);
    let tokens = [1, 2, 3, 4, 5, 6, 7, 8, 9];
    let dense = forward_lm(&cfg, &params, None, None, &tokens).unwrap();
    let masked = forward_lm(&cfg, &params, Some(&masks), Some(&lora), &tokens).unwrap();
    assert_eq!(dense, masked);
    assert!(dense.logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn zero_head_mask_equals_excising_the_head() {
    let (cfg, params, lora, mut rng) = setup(3);
    let x = random_x(&cfg, 6, &mut rng);
    for j in 0..cfg.n_heads {
        let mut masks = random_masks(&cfg, &mut rng);
        masks.head[1][j] = 0.0;
        let got = mha_masked(&cfg, 1, &x, &masks, &params, Some(&lora)).unwrap();
        let keep: Vec<usize> = (0..cfg.n_heads).filter(|&h| h != j).collect();
        let want = ref_mha(
            &cfg,
            &params.layers[1],
            Some(&lora),
            1,
            &to_mat(&x),
            &masks.head[1],
            &keep,
        );
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn head_mask_is_affine() {
    let (cfg, params, lora, mut rng) = setup(4);
    let x = random_x(&cfg, 5, &mut rng);
    let mut masks = random_masks(&cfg, &mut rng);
    let mut at = |v: f64| {
        masks.head[0][2] = v;
        mha_masked(&cfg, 0, &x, &masks, &params, Some(&lora)).unwrap()
    };
    let (y0, y1, yh, y03) = (at(0.0), at(1.0), at(0.5), at(0.3));
    for i in 0..y0.numel() {
        let (a, b) = (y0.data()[i], y1.data()[i]);
        assert!((yh.data()[i] - (a + 0.5 * (b - a))).abs() < 1e-12);
        assert!((y03.data()[i] - (a + 0.3 * (b - a))).abs() < 1e-12);
    }
    let ones = MaskSet::ones(&cfg);
    let all = mha_masked(&cfg, 0, &x, &ones, &params, Some(&lora)).unwrap();
    let heads: Vec<usize> = (0..cfg.n_heads).collect();
    let want = ref_mha(
        &cfg,
        &params.layers[0],
        Some(&lora),
        0,
        &to_mat(&x),
        &ones.head[0],
        &heads,
    );
    assert!(max_diff(&all, &want) < 1e-12);
}

#[test]
fn zero_channel_mask_equals_removing_the_channel() {
    let (cfg, params, lora, mut rng) = setup(5);
    let x = random_x(&cfg, 7, &mut rng);
    for c in [0, 4, 9] {
        let mut masks = MaskSet::ones(&cfg);
        masks.inter[0][c] = 0.0;
        let got = ffn_masked(&cfg, 0, &x, &masks, &params, Some(&lora)).unwrap();
        // rebuild on reduced matrices
        let keep: Vec<usize> = (0..cfg.d_ffn).filter(|&k| k != c).collect();
        let merged = lora.merge_into(&params).unwrap();
        let lp = &merged.layers[0];
        let mut reduced = lp.clone();
        reduced.w_gate = lp.w_gate.select_cols(&keep).unwrap();
        reduced.w_up = lp.w_up.select_cols(&keep).unwrap();
        reduced.w_down = lp.w_down.select_rows(&keep).unwrap();
        let small: Vec<usize> = (0..keep.len()).collect();
        let want = ref_ffn(
            &reduced,
            None,
            0,
            &to_mat(&x),
            &vec![1.0; keep.len()],
            &small,
        );
        assert!(max_diff(&got, &want) < 1e-12);
    }
    let zero = Tensor::zeros(&[4, cfg.d_hidden]);
    let out = ffn_masked(&cfg, 1, &zero, &MaskSet::ones(&cfg), &params, Some(&lora)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lora_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let a = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let ad = LoraAdapter::new(a.clone(), b.clone()).unwrap();
    let got = apply_lora(&w, &ad).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut v = w.get2(i, j);
            for r in 0..2 {
                v += b.get2(i, r) * a.get2(r, j);
            }
            assert!((got.get2(i, j) - v).abs() < 1e-14);
        }
    }
    let unchanged = LoraAdapter::new(a, Tensor::zeros(&[3, 2])).unwrap();
    assert_eq!(apply_lora(&w, &unchanged).unwrap(), w);

    // full rank: B = -W^T^T, A = I
    let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let cancel =
        LoraAdapter::new(Tensor::matrix(3, 3, eye).unwrap(), w.scale(-1.0).unwrap()).unwrap();
    assert!(apply_lora(&w, &cancel)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn bad_inputs_are_rejected() {
    let (cfg, params, _, mut rng) = setup(7);
    let err = forward_lm(&cfg, &params, None, None, &[1, 20]).unwrap_err();
    assert!(matches!(err, Error::OutOfRange(_)), "{err}");
    let long = vec![0; cfg.seq_len + 1];
    assert!(matches!(
        forward_lm(&cfg, &params, None, None, &long),
        Err(Error::OutOfRange(_))
    ));
    let x = random_x(&cfg, 3, &mut rng);
    let m = MaskSet::ones(&cfg);
    assert!(matches!(
        mha_masked(&cfg, 2, &x, &m, &params, None),
        Err(Error::OutOfRange(_))
    ));
    assert!(matches!(
        ffn_masked(&cfg, 5, &x, &m, &params, None),
        Err(Error::OutOfRange(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let (cfg, params, lora, mut rng) = setup(8);
    let mut ck = Checkpoint::new(&cfg, &params);
    ck.masks = Some(random_masks(&cfg, &mut rng));
    ck.lora = Some(lora);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.params().unwrap(), params);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replace("maskprune-checkpoint", "something-else"),
    )
    .unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Config(_))));
}

//! Distillation objective: output KL plus weighted layerwise hidden MSE.

use serde::{Deserialize, Serialize};

use crate::diffcore::{kernels, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{GraphOptions, LmGraph, LmOutput, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the summed hidden-state MSE.
    pub alpha: f64,
    /// Add next-token cross-entropy on the student.
    #[serde(default)]
    pub include_lm_loss: bool,
    #[serde(default = "one")]
    pub lm_loss_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            include_lm_loss: false,
            lm_loss_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !self.lm_loss_weight.is_finite() {
            return Err(Error::Config("lm_loss_weight must be finite".into()));
        }
        Ok(())
    }
}

/// `mean_rows sum_v p_s(v) (log p_s(v) - log p_t(v))`.
pub fn kl_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "kl_loss {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    Ok(kernels::kl_rows(
        student.data(),
        teacher.data(),
        student.cols(),
    ))
}

/// `sum_l MSE(h_s^l, h_t^l)`.
pub fn layer_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "layer_loss over {} student and {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0;
    for (l, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "layer {l} hidden {:?} vs {:?}",
                s.shape(),
                t.shape()
            )));
        }
        total += kernels::mse(s.data(), t.data());
    }
    Ok(total)
}

/// Loss components for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub kl: f64,
    pub layer_mse: f64,
    pub lm: f64,
}

/// `kl + alpha * layer` (+ weighted cross-entropy against `targets` when enabled).
pub fn distill_loss(
    student: &LmOutput,
    teacher: &LmOutput,
    cfg: &DistillConfig,
    targets: Option<&[usize]>,
) -> Result<LossParts> {
    cfg.validate()?;
    let kl = kl_loss(&student.logits, &teacher.logits)?;
    let layer_mse = layer_loss(&student.hiddens, &teacher.hiddens)?;
    let mut total = kl + cfg.alpha * layer_mse;
    let mut lm = 0.0;
    if cfg.include_lm_loss {
        let targets = targets
            .ok_or_else(|| Error::InvalidArgument("LM loss enabled but no targets given".into()))?;
        if targets.len() != student.logits.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} positions",
                targets.len(),
                student.logits.rows()
            )));
        }
        let v = student.logits.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange(format!("target id {bad} >= {v}")));
        }
        lm = kernels::cross_entropy_rows(student.logits.data(), targets, v);
        total += cfg.lm_loss_weight * lm;
    }
    Ok(LossParts {
        total,
        kl,
        layer_mse,
        lm,
    })
}

pub const TEACHER_LOGITS: &str = "teacher.logits";
pub const TARGETS: &str = "targets";

pub fn teacher_hidden_key(layer: usize) -> String {
    format!("teacher.hidden.{layer}")
}

/// Student decoder with the distillation loss attached. Teacher outputs
/// (and targets, when the LM term is on) are bound as inputs.
pub struct DistillGraph {
    pub lm: LmGraph,
    pub loss: NodeId,
    pub kl: NodeId,
    pub layer_mse: NodeId,
    pub lm_loss: Option<NodeId>,
}

impl DistillGraph {
    pub fn build(
        cfg: &ModelConfig,
        opts: GraphOptions,
        len: usize,
        distill: &DistillConfig,
    ) -> Result<Self> {
        distill.validate()?;
        let mut lm = LmGraph::build(cfg, opts, len)?;
        let g: &mut Graph = &mut lm.graph;
        let t_logits = g.input(TEACHER_LOGITS, &[len, cfg.vocab_size])?;
        let kl = g.kl_div(lm.logits, t_logits)?;
        let mut layer_mse = None;
        for (l, &h) in lm.hiddens.iter().enumerate() {
            let t_h = g.input(&teacher_hidden_key(l), &[len, cfg.d_hidden])?;
            let m = g.mse(h, t_h)?;
            layer_mse = Some(match layer_mse {
                None => m,
                Some(acc) => g.add(acc, m)?,
            });
        }
        let layer_mse = layer_mse.expect("model has at least one layer");
        let weighted = g.scale(layer_mse, distill.alpha)?;
        let mut loss = g.add(kl, weighted)?;
        let mut lm_loss = None;
        if distill.include_lm_loss {
            let targets = g.input(TARGETS, &[len])?;
            let ce = g.cross_entropy(lm.logits, targets)?;
            let w = g.scale(ce, distill.lm_loss_weight)?;
            loss = g.add(loss, w)?;
            lm_loss = Some(ce);
        }
        Ok(DistillGraph {
            lm,
            loss,
            kl,
            layer_mse,
            lm_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        let s = Tensor::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let t = Tensor::matrix(1, 2, vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_loss(&s, &t).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.14384).abs() < 1e-5);
        assert_eq!(kl_loss(&s, &s).unwrap(), 0.0);
        assert!(kl_loss(&s, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = Tensor::randn(&[1, 5], 3.0, &mut rng);
            let t = Tensor::randn(&[1, 5], 3.0, &mut rng);
            assert!(kl_loss(&s, &t).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn layer_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 5], 1.0, &mut rng))
            .collect();
        assert_eq!(layer_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<Tensor> = t
            .iter()
            .map(|x| x.add(&Tensor::ones(&[4, 5])).unwrap())
            .collect();
        assert!((layer_loss(&shifted, &t).unwrap() - 3.0).abs() < 1e-12);

        let s: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 5], 1.0, &mut rng))
            .collect();
        let mut brute = 0.0;
        for (a, b) in s.iter().zip(&t) {
            let mut acc = 0.0;
            for i in 0..20 {
                acc += (a.data()[i] - b.data()[i]).powi(2);
            }
            brute += acc / 20.0;
        }
        assert!((layer_loss(&s, &t).unwrap() - brute).abs() < 1e-12);
        assert!(layer_loss(&s[..2], &t).is_err());
    }

    #[test]
    fn distill_combines_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = |rng: &mut ChaCha8Rng| LmOutput {
            logits: Tensor::randn(&[3, 6], 1.0, rng),
            hiddens: (0..2).map(|_| Tensor::randn(&[3, 4], 1.0, rng)).collect(),
        };
        let (s, t) = (out(&mut rng), out(&mut rng));
        let kl = kl_loss(&s.logits, &t.logits).unwrap();
        let mse = layer_loss(&s.hiddens, &t.hiddens).unwrap();
        let zero = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(distill_loss(&s, &t, &zero, None).unwrap().total, kl);
        let two = DistillConfig {
            alpha: 2.0,
            ..Default::default()
        };
        assert!((distill_loss(&s, &t, &two, None).unwrap().total - (kl + 2.0 * mse)).abs() < 1e-12);
        assert_eq!(distill_loss(&t, &t, &two, None).unwrap().total, 0.0);

        let with_lm = DistillConfig {
            alpha: 2.0,
            include_lm_loss: true,
            lm_loss_weight: 0.5,
        };
        assert!(distill_loss(&s, &t, &with_lm, None).is_err());
        let parts = distill_loss(&s, &t, &with_lm, Some(&[0, 5, 2])).unwrap();
        let ce = kernels::cross_entropy_rows(s.logits.data(), &[0, 5, 2], 6);
        assert!((parts.total - (kl + 2.0 * mse + 0.5 * ce)).abs() < 1e-12);
        assert!(DistillConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

//! Dense tensors and a small reverse-mode differentiation engine.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Bindings, Gradients, Graph, NodeId, Values};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates `graph` with the given placeholder bindings.
pub fn forward<'a>(graph: &Graph, bindings: &Bindings<'a>) -> Result<Values<'a>> {
    graph.forward(bindings)
}

/// Gradients of the scalar `loss` with respect to every trainable placeholder.
pub fn backward(graph: &Graph, values: &Values<'_>, loss: NodeId) -> Result<Gradients> {
    graph.backward(values, loss)
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    let mut probe = x.data().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - eps;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff probe {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(1e-12);
        diff / scale
    }

    /// Checks every trainable placeholder of `graph` against central
    /// differences of the scalar node `loss`.
    fn check_graph(graph: &Graph, loss: NodeId, values: &[(&str, Tensor)]) {
        let mut b = Bindings::new();
        for (name, t) in values {
            b.bind(*name, t);
        }
        let vals = graph.forward(&b).unwrap();
        let grads = graph.backward(&vals, loss).unwrap();
        for (name, _) in graph.params() {
            let idx = values.iter().position(|(n, _)| *n == name).unwrap();
            let fd = finite_diff(
                |probe| {
                    let mut bb = Bindings::new();
                    for (j, (n, t)) in values.iter().enumerate() {
                        bb.bind(*n, if j == idx { probe } else { t });
                    }
                    graph.forward(&bb)?.get(loss).item()
                },
                &values[idx].1,
                1e-5,
            )
            .unwrap();
            let err = rel_err(grads.get(name).unwrap(), &fd);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn matmul_identity_forward() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let i = g.input("i", &[2, 2]).unwrap();
        let c = g.matmul(a, i).unwrap();
        let at = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let it = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("a", &at).bind("i", &it);
        assert_eq!(g.forward(&b).unwrap().get(c), &at);
    }

    #[test]
    fn softmax_symmetric_and_silu_zero() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 2]).unwrap();
        let s = g.softmax(x).unwrap();
        let y = g.silu(x).unwrap();
        let xt = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &xt);
        let v = g.forward(&b).unwrap();
        assert_eq!(v.get(s).data(), &[0.5, 0.5]);
        assert_eq!(v.get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input("x", &[6, 6]).unwrap();
        let s = g.softmax(x).unwrap();
        let c = g.causal_softmax(x).unwrap();
        let xt = Tensor::randn(&[6, 6], 4.0, &mut rng);
        let mut b = Bindings::new();
        b.bind("x", &xt);
        let v = g.forward(&b).unwrap();
        for node in [s, c] {
            for r in 0..6 {
                let total: f64 = v.get(node).row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        // causal rows never look ahead
        assert_eq!(v.get(c).get2(0, 1), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let xt = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &xt);
        let v = g.forward(&b).unwrap();
        let grads = g.backward(&v, sq).unwrap();
        assert_eq!(grads.get("x").unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 5]).unwrap();
        let s = g.softmax(x).unwrap();
        let total = g.sum(s).unwrap();
        let xt = Tensor::matrix(1, 5, vec![0.3, -1.0, 2.0, 0.1, 0.7]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &xt);
        let v = g.forward(&b).unwrap();
        let grads = g.backward(&v, total).unwrap();
        for d in grads.get("x").unwrap().data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_basics() {
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]).unwrap();
        let fd = finite_diff(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for d in fd.data() {
            assert!((d - 1.0).abs() < 1e-9);
        }
        let fd = finite_diff(
            |t| Ok(t.data()[0] * t.data()[0]),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!((fd.item().unwrap() - 6.0).abs() < 1e-8);
        assert!(finite_diff(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(matches!(
            finite_diff(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.param("a", &[3, 3]).unwrap();
        let b = g.param("b", &[3, 3]).unwrap();
        let c = g.param("c", &[3, 3]).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let abc = g.matmul(ab, c).unwrap();
        let sq = g.mul(abc, abc).unwrap();
        let loss = g.sum(sq).unwrap();
        let vals: Vec<(&str, Tensor)> = ["a", "b", "c"]
            .into_iter()
            .map(|n| (n, Tensor::randn(&[3, 3], 1.0, &mut rng)))
            .collect();
        check_graph(&g, loss, &vals);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, d, heads, hd, v) = (5, 8, 2, 4, 7);
        let mut g = Graph::new();
        let table = g.param("table", &[v, d]).unwrap();
        let ids = g.input("ids", &[t]).unwrap();
        let gain = g.param("gain", &[d]).unwrap();
        let w = g.param("w", &[d, d]).unwrap();
        let mask = g.param("mask", &[heads]).unwrap();
        let head = g.param("head", &[d, v]).unwrap();
        let targets = g.input("targets", &[t]).unwrap();
        let other = g.param("other", &[t, v]).unwrap();

        let x = g.embedding(table, ids).unwrap();
        let n = g.rms_norm(x, gain, 1e-6).unwrap();
        let q = g.matmul(n, w).unwrap();
        let q = g.rope(q, hd, 10000.0).unwrap();
        let mut outs = Vec::new();
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd).unwrap();
            let kh = g.slice_cols(n, h * hd, hd).unwrap();
            let s = g.matmul_bt(qh, kh).unwrap();
            let s = g.scale(s, 0.5).unwrap();
            let p = g.causal_softmax(s).unwrap();
            outs.push(g.matmul(p, kh).unwrap());
        }
        let cat = g.concat_cols(&outs).unwrap();
        let rep = g.repeat_each(mask, hd).unwrap();
        let masked = g.mul_row(cat, rep).unwrap();
        let act = g.silu(masked).unwrap();
        let gated = g.mul(act, x).unwrap();
        let res = g.add(gated, x).unwrap();
        let logits = g.matmul(res, head).unwrap();
        let ce = g.cross_entropy(logits, targets).unwrap();
        let kl = g.kl_div(logits, other).unwrap();
        let ls = g.log_softmax(logits).unwrap();
        let sm = g.softmax(other).unwrap();
        let mixed = g.mul(ls, sm).unwrap();
        let mixed = g.sum(mixed).unwrap();
        let mse = g.mse(res, x).unwrap();
        let a1 = g.add(ce, kl).unwrap();
        let a2 = g.add(a1, mixed).unwrap();
        let loss = g.add(a2, mse).unwrap();

        let vals = vec![
            ("table", Tensor::randn(&[v, d], 1.0, &mut rng)),
            ("ids", Tensor::ids(&[0, 3, 3, 6, 1])),
            ("gain", Tensor::randn(&[d], 1.0, &mut rng)),
            ("w", Tensor::randn(&[d, d], 0.5, &mut rng)),
            ("mask", Tensor::vector(vec![0.7, 0.3]).unwrap()),
            ("head", Tensor::randn(&[d, v], 0.5, &mut rng)),
            ("targets", Tensor::ids(&[1, 2, 0, 6, 4])),
            ("other", Tensor::randn(&[t, v], 1.0, &mut rng)),
        ];
        check_graph(&g, loss, &vals);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(g.input("a", &[1]).is_err());
        let c = g.add(a, b).unwrap();
        let at = Tensor::zeros(&[2, 3]);
        let mut bind = Bindings::new();
        bind.bind("a", &at);
        assert!(matches!(g.forward(&bind), Err(Error::Unbound(n)) if n == "b"));
        let wrong = Tensor::zeros(&[3, 2]);
        bind.bind("b", &wrong);
        assert!(matches!(g.forward(&bind), Err(Error::Shape(_))));
        bind.bind("b", &at);
        let v = g.forward(&bind).unwrap();
        assert!(matches!(g.backward(&v, c), Err(Error::NonScalarLoss(_))));

        // overflow surfaces as a non-finite intermediate
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.scale(x, 1e300).unwrap();
        let z = g.mul(y, y).unwrap();
        let xt = Tensor::vector(vec![10.0]).unwrap();
        let mut bind = Bindings::new();
        bind.bind("x", &xt);
        let _ = z;
        assert!(matches!(g.forward(&bind), Err(Error::NonFinite(_))));
    }

    #[test]
    fn integer_inputs_have_no_derivative() {
        let mut g = Graph::new();
        let table = g.param("table", &[4, 2]).unwrap();
        let ids = g.param("ids", &[2]).unwrap();
        let e = g.embedding(table, ids).unwrap();
        let s = g.sum(e).unwrap();
        let tt = Tensor::ones(&[4, 2]);
        let it = Tensor::ids(&[1, 3]);
        let mut b = Bindings::new();
        b.bind("table", &tt).bind("ids", &it);
        let v = g.forward(&b).unwrap();
        assert!(matches!(g.backward(&v, s), Err(Error::NoDerivative(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let _unused = g.param("unused", &[3]).unwrap();
        let s = g.sum(x).unwrap();
        let xt = Tensor::ones(&[2]);
        let ut = Tensor::ones(&[3]);
        let mut b = Bindings::new();
        b.bind("x", &xt).bind("unused", &ut);
        let v = g.forward(&b).unwrap();
        let grads = g.backward(&v, s).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let a = g.input("a", &[16, 16]).unwrap();
        let b = g.input("b", &[16, 16]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        let at = Tensor::randn(&[16, 16], 1.0, &mut rng);
        let bt = Tensor::randn(&[16, 16], 1.0, &mut rng);
        let mut bind = Bindings::new();
        bind.bind("a", &at).bind("b", &bt);
        let first = g.forward(&bind).unwrap().get(s).clone();
        for _ in 0..3 {
            assert_eq!(g.forward(&bind).unwrap().get(s), &first);
        }
    }
}

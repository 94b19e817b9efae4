//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from placeholders (inputs and trainable
//! parameters) and ops, then evaluated any number of times against
//! different [`Bindings`]. Evaluation never mutates the graph, so one graph
//! can serve several sequences of a batch at once.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
    },
    Param {
        name: String,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a * b^T`
    MatMulBt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    /// Broadcast a row vector over every row of a matrix.
    MulRow {
        a: NodeId,
        row: NodeId,
    },
    RepeatEach {
        a: NodeId,
        times: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Silu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        causal: bool,
    },
    RmsNorm {
        a: NodeId,
        gain: NodeId,
        eps: f64,
    },
    Embedding {
        table: NodeId,
        ids: NodeId,
    },
    Rope {
        a: NodeId,
        head_dim: usize,
        cos: Arc<[f64]>,
        sin: Arc<[f64]>,
    },
    LogSoftmax {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: NodeId,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    KlDiv {
        student: NodeId,
        teacher: NodeId,
    },
    Sum {
        a: NodeId,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulRow { .. } => "mul_row",
            Op::RepeatEach { .. } => "repeat_each",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Silu { .. } => "silu",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::Rope { .. } => "rope",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::KlDiv { .. } => "kl_div",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::MatMul { a, b }
            | Op::MatMulBt { a, b }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b } => vec![*a, *b],
            Op::MulRow { a, row } => vec![*a, *row],
            Op::Scale { a, .. }
            | Op::RepeatEach { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Silu { a }
            | Op::Softmax { a, .. }
            | Op::Rope { a, .. }
            | Op::LogSoftmax { a }
            | Op::Sum { a } => vec![*a],
            Op::ConcatCols { parts } => parts.clone(),
            Op::RmsNorm { a, gain, .. } => vec![*a, *gain],
            Op::Embedding { table, ids } => vec![*table, *ids],
            Op::CrossEntropy { logits, targets } => vec![*logits, *targets],
            Op::KlDiv { student, teacher } => vec![*student, *teacher],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
    params: Vec<NodeId>,
}

/// Placeholder values for one evaluation, borrowed from the caller.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings {
            map: HashMap::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }
}

/// Output of every node from one forward evaluation.
pub struct Values<'a> {
    vals: Vec<Cow<'a, Tensor>>,
}

impl<'a> Values<'a> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

fn ids_from(t: &Tensor, limit: usize, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v >= limit as f64 {
                Err(Error::OutOfRange(format!("{what} id {v} (limit {limit})")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params
            .iter()
            .map(move |&id| match &self.nodes[id.0].op {
                Op::Param { name } => (name.as_str(), id),
                _ => unreachable!("params only holds Param nodes"),
            })
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { .. } => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        id
    }

    fn placeholder(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "placeholder `{name}` declared twice"
            )));
        }
        let op = if trainable {
            Op::Param {
                name: name.to_string(),
            }
        } else {
            Op::Input {
                name: name.to_string(),
            }
        };
        let id = self.push(op, shape.to_vec());
        self.by_name.insert(name.to_string(), id);
        if trainable {
            self.params.push(id);
        }
        Ok(id)
    }

    /// Non-trainable placeholder.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.placeholder(name, shape, false)
    }

    /// Trainable placeholder; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.placeholder(name, shape, true)
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn dims1(&self, id: NodeId, what: &str) -> Result<usize> {
        match self.shape(id) {
            [n] => Ok(*n),
            s => Err(Error::Shape(format!("{what} expects a vector, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        Ok(self.push(Op::MatMul { a, b }, vec![m, n]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt [{m},{k}] x [{n},{k2}]^T")));
        }
        Ok(self.push(Op::MatMulBt { a, b }, vec![m, n]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul { a, b }, shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale { a, factor }, shape))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "mul_row")?;
        let n = self.dims1(row, "mul_row")?;
        if n != c {
            return Err(Error::Shape(format!("mul_row [{r},{c}] by [{n}]")));
        }
        Ok(self.push(Op::MulRow { a, row }, vec![r, c]))
    }

    /// `[a0, a1] -> [a0, a0, a1, a1]` for `times = 2`.
    pub fn repeat_each(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let n = self.dims1(a, "repeat_each")?;
        Ok(self.push(Op::RepeatEach { a, times }, vec![n * times]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::OutOfRange(format!(
                "slice_cols {start}..{} of {c}",
                start + len
            )));
        }
        Ok(self.push(Op::SliceCols { a, start, len }, vec![r, len]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols rows {pr} vs {r}")));
            }
            total += pc;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![r, total],
        ))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Silu { a }, shape))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "softmax")?;
        Ok(self.push(Op::Softmax { a, causal: false }, vec![r, c]))
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "causal_softmax")?;
        if r > c {
            return Err(Error::Shape(format!(
                "causal_softmax needs rows <= cols, got [{r},{c}]"
            )));
        }
        Ok(self.push(Op::Softmax { a, causal: true }, vec![r, c]))
    }

    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "rms_norm")?;
        let g = self.dims1(gain, "rms_norm gain")?;
        if g != c {
            return Err(Error::Shape(format!("rms_norm gain [{g}] for width {c}")));
        }
        Ok(self.push(Op::RmsNorm { a, gain, eps }, vec![r, c]))
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId> {
        let (_, d) = self.dims2(table, "embedding table")?;
        let t = self.dims1(ids, "embedding ids")?;
        Ok(self.push(Op::Embedding { table, ids }, vec![t, d]))
    }

    /// Rotary position embedding on consecutive `(2p, 2p+1)` pairs inside
    /// every `head_dim`-wide block of columns; row index is the position.
    pub fn rope(&mut self, a: NodeId, head_dim: usize, base: f64) -> Result<NodeId> {
        let (t, c) = self.dims2(a, "rope")?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !c.is_multiple_of(head_dim) {
            return Err(Error::Shape(format!(
                "rope head_dim {head_dim} incompatible with width {c}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for pos in 0..t {
            for p in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * p as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Ok(self.push(
            Op::Rope {
                a,
                head_dim,
                cos: cos.into(),
                sin: sin.into(),
            },
            vec![t, c],
        ))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax { a }, vec![r, c]))
    }

    /// Mean next-token negative log-likelihood; scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (r, _) = self.dims2(logits, "cross_entropy")?;
        let t = self.dims1(targets, "cross_entropy targets")?;
        if t != r {
            return Err(Error::Shape(format!("cross_entropy {r} rows, {t} targets")));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }, vec![]))
    }

    /// Mean squared error; scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        Ok(self.push(Op::Mse { a, b }, vec![]))
    }

    /// `D_KL(softmax(student) || softmax(teacher))` averaged over rows; scalar.
    pub fn kl_div(&mut self, student: NodeId, teacher: NodeId) -> Result<NodeId> {
        self.same_shape(student, teacher, "kl_div")?;
        self.dims2(student, "kl_div")?;
        Ok(self.push(Op::KlDiv { student, teacher }, vec![]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum { a }, vec![]))
    }

    /// Evaluates every node in insertion order.
    pub fn forward<'a>(&self, bindings: &Bindings<'a>) -> Result<Values<'a>> {
        let mut vals: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input { name } | Op::Param { name } => {
                    let t = *bindings
                        .map
                        .get(name)
                        .ok_or_else(|| Error::Unbound(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "`{name}` declared {:?}, bound {:?}",
                            node.shape,
                            t.shape()
                        )));
                    }
                    Cow::Borrowed(t)
                }
                op => {
                    let data = self.eval(op, &node.shape, &vals)?;
                    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "{} (node {idx}, element {pos})",
                            op.kind()
                        )));
                    }
                    Cow::Owned(Tensor::from_parts(node.shape.clone(), data))
                }
            };
            vals.push(v);
        }
        Ok(Values { vals })
    }

    fn eval(&self, op: &Op, shape: &[usize], vals: &[Cow<'_, Tensor>]) -> Result<Vec<f64>> {
        let v = |id: NodeId| -> &Tensor { &vals[id.0] };
        let out = match op {
            Op::Input { .. } | Op::Param { .. } => unreachable!(),
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = shape[1];
                let mut out = vec![0.0; m * n];
                gemm(
                    m,
                    k,
                    n,
                    v(*a).data(),
                    false,
                    v(*b).data(),
                    false,
                    &mut out,
                    0.0,
                );
                out
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = shape[1];
                let mut out = vec![0.0; m * n];
                gemm(
                    m,
                    k,
                    n,
                    v(*a).data(),
                    false,
                    v(*b).data(),
                    true,
                    &mut out,
                    0.0,
                );
                out
            }
            Op::Add { a, b } => v(*a)
                .data()
                .iter()
                .zip(v(*b).data())
                .map(|(x, y)| x + y)
                .collect(),
            Op::Mul { a, b } => v(*a)
                .data()
                .iter()
                .zip(v(*b).data())
                .map(|(x, y)| x * y)
                .collect(),
            Op::Scale { a, factor } => v(*a).data().iter().map(|x| x * factor).collect(),
            Op::MulRow { a, row } => {
                let c = shape[1];
                let r = v(*row).data();
                let mut out = v(*a).data().to_vec();
                for chunk in out.chunks_mut(c) {
                    for (x, f) in chunk.iter_mut().zip(r) {
                        *x *= f;
                    }
                }
                out
            }
            Op::RepeatEach { a, times } => v(*a)
                .data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, *times))
                .collect(),
            Op::SliceCols { a, start, len } => {
                let src = v(*a);
                let c = src.cols();
                let mut out = Vec::with_capacity(shape[0] * len);
                for row in src.data().chunks(c) {
                    out.extend_from_slice(&row[*start..start + len]);
                }
                out
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (shape[0], shape[1]);
                let mut out = vec![0.0; r * total];
                let mut off = 0;
                for p in parts {
                    let src = v(*p);
                    let pc = src.cols();
                    for i in 0..r {
                        out[i * total + off..i * total + off + pc]
                            .copy_from_slice(&src.data()[i * pc..(i + 1) * pc]);
                    }
                    off += pc;
                }
                out
            }
            Op::Silu { a } => v(*a).data().iter().map(|&x| kernels::silu(x)).collect(),
            Op::Softmax { a, causal } => {
                let c = shape[1];
                let mut out = vec![0.0; shape[0] * c];
                for (i, (src, dst)) in v(*a).data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
                    let len = if *causal { i + 1 } else { c };
                    kernels::softmax_prefix(src, len, dst);
                }
                out
            }
            Op::RmsNorm { a, gain, eps } => {
                let c = shape[1];
                let g = v(*gain).data();
                let mut out = vec![0.0; shape[0] * c];
                for (src, dst) in v(*a).data().chunks(c).zip(out.chunks_mut(c)) {
                    let ms = src.iter().map(|x| x * x).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    for ((d, s), gg) in dst.iter_mut().zip(src).zip(g) {
                        *d = s * inv * gg;
                    }
                }
                out
            }
            Op::Embedding { table, ids } => {
                let tab = v(*table);
                let ids = ids_from(v(*ids), tab.rows(), "embedding")?;
                let d = shape[1];
                let mut out = Vec::with_capacity(ids.len() * d);
                for id in ids {
                    out.extend_from_slice(tab.row(id));
                }
                out
            }
            Op::Rope {
                a,
                head_dim,
                cos,
                sin,
            } => {
                let c = shape[1];
                let half = head_dim / 2;
                let mut out = v(*a).data().to_vec();
                for (t, row) in out.chunks_mut(c).enumerate() {
                    for head in row.chunks_mut(*head_dim) {
                        for p in 0..half {
                            let (co, si) = (cos[t * half + p], sin[t * half + p]);
                            let (x0, x1) = (head[2 * p], head[2 * p + 1]);
                            head[2 * p] = x0 * co - x1 * si;
                            head[2 * p + 1] = x0 * si + x1 * co;
                        }
                    }
                }
                out
            }
            Op::LogSoftmax { a } => {
                let c = shape[1];
                let mut out = vec![0.0; v(*a).numel()];
                for (src, dst) in v(*a).data().chunks(c).zip(out.chunks_mut(c)) {
                    kernels::log_softmax_row(src, dst);
                }
                out
            }
            Op::CrossEntropy { logits, targets } => {
                let lg = v(*logits);
                let t = ids_from(v(*targets), lg.cols(), "target")?;
                vec![kernels::cross_entropy_rows(lg.data(), &t, lg.cols())]
            }
            Op::Mse { a, b } => vec![kernels::mse(v(*a).data(), v(*b).data())],
            Op::KlDiv { student, teacher } => {
                let s = v(*student);
                vec![kernels::kl_rows(s.data(), v(*teacher).data(), s.cols())]
            }
            Op::Sum { a } => vec![v(*a).data().iter().sum()],
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient per
    /// trainable placeholder (zeros when the loss does not depend on it).
    pub fn backward(&self, values: &Values<'_>, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        if values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument(
                "values were produced by a different graph".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = BTreeMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Param { name } = &node.op {
                out.insert(name.clone(), Tensor::from_parts(node.shape.clone(), g));
                continue;
            }
            let out = values.get(NodeId(idx)).data();
            self.backprop(&node.op, &node.shape, out, &g, values, &mut grads)?;
        }
        for (name, id) in self.params() {
            out.entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&self.nodes[id.0].shape));
        }
        Ok(Gradients { map: out })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.shape.iter().product();
        Some(
            grads[id.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    fn no_grad_through(&self, id: NodeId, what: &str) -> Result<()> {
        if self.nodes[id.0].requires_grad {
            return Err(Error::NoDerivative(format!("{what} (integer index input)")));
        }
        Ok(())
    }

    fn backprop(
        &self,
        op: &Op,
        shape: &[usize],
        out: &[f64],
        g: &[f64],
        values: &Values<'_>,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let v = |id: NodeId| values.get(id);
        match op {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, v(*b).data(), true, da, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, v(*a).data(), true, g, false, db, 1.0);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, v(*b).data(), false, da, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(n, m, k, g, true, v(*a).data(), false, db, 1.0);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(d) = self.slot(grads, id) {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((x, y), o) in da.iter_mut().zip(g).zip(v(*b).data()) {
                        *x += y * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((x, y), o) in db.iter_mut().zip(g).zip(v(*a).data()) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += factor * y;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let c = shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    let r = v(*row).data();
                    for (dchunk, gchunk) in da.chunks_mut(c).zip(g.chunks(c)) {
                        for ((x, y), f) in dchunk.iter_mut().zip(gchunk).zip(r) {
                            *x += y * f;
                        }
                    }
                }
                if let Some(dr) = self.slot(grads, *row) {
                    for (gchunk, achunk) in g.chunks(c).zip(v(*a).data().chunks(c)) {
                        for ((x, y), aa) in dr.iter_mut().zip(gchunk).zip(achunk) {
                            *x += y * aa;
                        }
                    }
                }
            }
            Op::RepeatEach { a, times } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (x, chunk) in da.iter_mut().zip(g.chunks(*times)) {
                        *x += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                if let Some(da) = self.slot(grads, *a) {
                    let c = self.shape(*a)[1];
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(*len)) {
                        for (x, y) in drow[*start..start + len].iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = shape[1];
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if let Some(dp) = self.slot(grads, *p) {
                        for (drow, grow) in dp.chunks_mut(pc).zip(g.chunks(total)) {
                            for (x, y) in drow.iter_mut().zip(&grow[off..off + pc]) {
                                *x += y;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Silu { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((x, y), inp) in da.iter_mut().zip(g).zip(v(*a).data()) {
                        *x += y * kernels::silu_grad(*inp);
                    }
                }
            }
            Op::Softmax { a, .. } => {
                if let Some(da) = self.slot(grads, *a) {
                    let c = shape[1];
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let c = shape[1];
                let gvec = v(*gain).data();
                let x = v(*a).data();
                let mut normed = vec![0.0; x.len()];
                let mut invs = Vec::with_capacity(shape[0]);
                for (src, dst) in x.chunks(c).zip(normed.chunks_mut(c)) {
                    let ms = src.iter().map(|q| q * q).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * inv;
                    }
                    invs.push(inv);
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for ((x, y), n) in dg.iter_mut().zip(grow).zip(nrow) {
                            *x += y * n;
                        }
                    }
                }
                if let Some(da) = self.slot(grads, *a) {
                    let mut dn = vec![0.0; c];
                    for (((drow, grow), nrow), inv) in da
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(normed.chunks(c))
                        .zip(&invs)
                    {
                        for ((d, y), gg) in dn.iter_mut().zip(grow).zip(gvec) {
                            *d = y * gg;
                        }
                        let mean: f64 =
                            dn.iter().zip(nrow).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for ((x, d), n) in drow.iter_mut().zip(&dn).zip(nrow) {
                            *x += inv * (d - n * mean);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                self.no_grad_through(*ids, "embedding ids")?;
                if let Some(dt) = self.slot(grads, *table) {
                    let d = shape[1];
                    let rows = self.shape(*table)[0];
                    let idx = ids_from(v(*ids), rows, "embedding")?;
                    for (t, id) in idx.into_iter().enumerate() {
                        for (x, y) in dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[t * d..(t + 1) * d])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::Rope {
                a,
                head_dim,
                cos,
                sin,
            } => {
                if let Some(da) = self.slot(grads, *a) {
                    let c = shape[1];
                    let half = head_dim / 2;
                    for (t, (drow, grow)) in da.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (dh, gh) in drow.chunks_mut(*head_dim).zip(grow.chunks(*head_dim)) {
                            for p in 0..half {
                                let (co, si) = (cos[t * half + p], sin[t * half + p]);
                                let (g0, g1) = (gh[2 * p], gh[2 * p + 1]);
                                dh[2 * p] += g0 * co + g1 * si;
                                dh[2 * p + 1] += -g0 * si + g1 * co;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    let c = shape[1];
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += gy - y.exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                self.no_grad_through(*targets, "cross_entropy targets")?;
                if let Some(dl) = self.slot(grads, *logits) {
                    let lg = v(*logits);
                    let c = lg.cols();
                    let t = ids_from(v(*targets), c, "target")?;
                    let scale = g[0] / t.len() as f64;
                    let mut buf = vec![0.0; c];
                    for (r, &target) in t.iter().enumerate() {
                        kernels::log_softmax_row(&lg.data()[r * c..(r + 1) * c], &mut buf);
                        let drow = &mut dl[r * c..(r + 1) * c];
                        for (x, l) in drow.iter_mut().zip(&buf) {
                            *x += scale * l.exp();
                        }
                        drow[target] -= scale;
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (v(*a).data(), v(*b).data());
                let scale = 2.0 * g[0] / av.len() as f64;
                if let Some(da) = self.slot(grads, *a) {
                    for ((x, p), q) in da.iter_mut().zip(av).zip(bv) {
                        *x += scale * (p - q);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((x, p), q) in db.iter_mut().zip(av).zip(bv) {
                        *x -= scale * (p - q);
                    }
                }
            }
            Op::KlDiv { student, teacher } => {
                let s = v(*student);
                let t = v(*teacher);
                let c = s.cols();
                let rows = s.rows();
                let scale = g[0] / rows as f64;
                let mut ls = vec![0.0; c];
                let mut lt = vec![0.0; c];
                let want_s = self.nodes[student.0].requires_grad;
                let want_t = self.nodes[teacher.0].requires_grad;
                for r in 0..rows {
                    kernels::log_softmax_row(&s.data()[r * c..(r + 1) * c], &mut ls);
                    kernels::log_softmax_row(&t.data()[r * c..(r + 1) * c], &mut lt);
                    if want_s {
                        let kl: f64 = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
                        let ds = self.slot(grads, *student).expect("requires grad");
                        for ((x, a), b) in ds[r * c..(r + 1) * c].iter_mut().zip(&ls).zip(&lt) {
                            *x += scale * a.exp() * ((a - b) - kl);
                        }
                    }
                    if want_t {
                        let dt = self.slot(grads, *teacher).expect("requires grad");
                        for ((x, a), b) in dt[r * c..(r + 1) * c].iter_mut().zip(&ls).zip(&lt) {
                            *x += scale * (b.exp() - a.exp());
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for x in da.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

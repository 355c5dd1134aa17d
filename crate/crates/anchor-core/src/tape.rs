//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A forward pass records one node per op into an arena; every intermediate
//! value stays alive there, so backward never recomputes. Backward walks the
//! arena exactly once in reverse creation order and accumulates gradients
//! additively in that fixed order, which makes gradient values reproducible
//! bit for bit.

use crate::error::{AnchorError, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Precision, Tensor};

pub type TensorId = usize;

/// Op kind plus the attributes its backward rule needs.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input, parameter or constant; never has inputs.
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise reciprocal.
    Recip,
    /// Elementwise natural log.
    Log,
    /// Elementwise exp.
    Exp,
    Relu,
    ScalarMul(f64),
    ScalarAdd(f64),
    /// [m,k] x [k,n] -> [m,n].
    Matmul,
    /// [n,m] plus a row vector [m] added to every row.
    BiasAddRows,
    /// 3x3, stride 1, pad 1: input [B,Cin,H,W], weight [Cout,Cin,3,3].
    Conv2d,
    /// [B,C,H,W] -> [B,C], mean over the spatial extent.
    GlobalAvgPool,
    /// [B, ...] -> [B, prod(rest)].
    Flatten,
    /// Rows scaled to unit norm; the divisor is ||row|| + 1e-12.
    L2NormalizeRows,
    /// [N,D] -> [N,N] Gram matrix Z Z^T.
    PairwiseDot,
    /// [N,M] -> [N].
    RowSum,
    /// [N,M] x [N] -> [N,M], row i scaled by v[i].
    RowScale,
    /// Any shape -> scalar sum.
    SumAll,
    /// Row-wise log-sum-exp, [N,M] -> [N].
    LogSumExpRows,
    /// Stack two matrices with equal column counts: [n1,M] + [n2,M] -> [n1+n2,M].
    ConcatRows,
    /// Mean cross-entropy from logits [N,C]; scalar output.
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Recip => "recip",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::ScalarMul(_) => "scalar-mul",
            Op::ScalarAdd(_) => "scalar-add",
            Op::Matmul => "matmul",
            Op::BiasAddRows => "bias-add-rows",
            Op::Conv2d => "conv2d",
            Op::GlobalAvgPool => "global-avg-pool",
            Op::Flatten => "flatten",
            Op::L2NormalizeRows => "l2-normalize-rows",
            Op::PairwiseDot => "pairwise-dot",
            Op::RowSum => "row-sum",
            Op::RowScale => "row-scale",
            Op::SumAll => "sum-all",
            Op::LogSumExpRows => "log-sum-exp",
            Op::ConcatRows => "concat-rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Append-only op recorder; consumed by a single backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
    /// Rows that hit the zero-norm floor inside l2-normalize, for diagnostics.
    zero_norm_rows: u64,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            consumed: false,
            zero_norm_rows: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_norm_rows(&self) -> u64 {
        self.zero_norm_rows
    }

    /// Register a tensor as a leaf. Values are snapshotted.
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.leaf(t.values().to_vec(), t.shape().to_vec(), t.requires_grad)
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(values, shape, false)
    }

    pub fn leaf(&mut self, mut values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        self.precision.quantize_slice(&mut values);
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape,
            values,
            grad: None,
            needs_grad: requires_grad,
        })
    }

    fn push(&mut self, node: Node) -> TensorId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    #[inline]
    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].values
    }

    #[inline]
    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    /// Gradient populated by `backward`, if any reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Op kind recorded for a node (structural introspection).
    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id].op.name()
    }

    /// Ids of the nodes that consume `id` as an input.
    pub fn consumers(&self, id: TensorId) -> Vec<TensorId> {
        (0..self.nodes.len())
            .filter(|&n| self.nodes[n].inputs.contains(&id))
            .collect()
    }

    /// Input ids of a node.
    pub fn node_inputs(&self, id: TensorId) -> &[TensorId] {
        &self.nodes[id].inputs
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id];
        let mut t = Tensor::new(n.shape.clone(), n.values.clone()).expect("node shape consistent");
        t.grad = n.grad.clone();
        t.requires_grad = n.needs_grad;
        t
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(AnchorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn mismatch(&self, op: &'static str, a: TensorId, b: TensorId) -> AnchorError {
        AnchorError::ShapeMismatch {
            op,
            lhs: self.nodes[a].shape.clone(),
            rhs: self.nodes[b].shape.clone(),
        }
    }

    /// Record one op. Shape-checks inputs, computes the output eagerly,
    /// quantizes it to the tape precision and verifies it is finite.
    pub fn apply(&mut self, op: Op, inputs: &[TensorId]) -> Result<TensorId> {
        self.check_open()?;
        let (shape, mut values) = self.eval(&op, inputs)?;
        self.precision.quantize_slice(&mut values);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AnchorError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
            values,
            grad: None,
            needs_grad,
        }))
    }

    fn eval(&mut self, op: &Op, inputs: &[TensorId]) -> Result<(Vec<usize>, Vec<f64>)> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(AnchorError::BadShape {
                    op: op.name(),
                    shape: vec![inputs.len()],
                    reason: format!("expected {n} inputs"),
                });
            }
            Ok(())
        };
        match op {
            Op::Leaf => Err(AnchorError::BadShape {
                op: "leaf",
                shape: vec![],
                reason: "leaves are created via input/constant".into(),
            }),
            Op::Add | Op::Sub | Op::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a].shape != self.nodes[b].shape {
                    return Err(self.mismatch(op.name(), a, b));
                }
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let out = match op {
                    Op::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
                    Op::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
                    _ => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
                };
                Ok((self.nodes[a].shape.clone(), out))
            }
            Op::Recip => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| 1.0 / x).collect()))
            }
            Op::Log => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| x.ln()).collect()))
            }
            Op::Exp => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| x.exp()).collect()))
            }
            Op::Relu => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| x.max(0.0)).collect()))
            }
            Op::ScalarMul(c) => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| x * c).collect()))
            }
            Op::ScalarAdd(c) => {
                arity(1)?;
                let a = &self.nodes[inputs[0]];
                Ok((a.shape.clone(), a.values.iter().map(|x| x + c).collect()))
            }
            Op::Matmul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(self.mismatch("matmul", a, b));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                kernels::matmul(
                    &self.nodes[a].values,
                    &self.nodes[b].values,
                    &mut out,
                    m,
                    k,
                    n,
                    self.precision,
                );
                Ok((vec![m, n], out))
            }
            Op::BiasAddRows => {
                arity(2)?;
                let (x, b) = (inputs[0], inputs[1]);
                let (sx, sb) = (&self.nodes[x].shape, &self.nodes[b].shape);
                if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
                    return Err(self.mismatch("bias-add-rows", x, b));
                }
                let (n, m) = (sx[0], sx[1]);
                let xv = &self.nodes[x].values;
                let bv = &self.nodes[b].values;
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] = xv[i * m + j] + bv[j];
                    }
                }
                Ok((sx.clone(), out))
            }
            Op::Conv2d => {
                arity(2)?;
                let (x, w) = (inputs[0], inputs[1]);
                let (sx, sw) = (&self.nodes[x].shape, &self.nodes[w].shape);
                if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sx[1] != sw[1] {
                    return Err(self.mismatch("conv2d", x, w));
                }
                let d = ConvDims {
                    batch: sx[0],
                    c_in: sx[1],
                    c_out: sw[0],
                    h: sx[2],
                    w: sx[3],
                };
                let mut out = vec![0.0; d.batch * d.c_out * d.hw()];
                kernels::conv2d_forward(
                    &self.nodes[x].values,
                    &self.nodes[w].values,
                    &mut out,
                    &d,
                    self.precision,
                );
                Ok((vec![d.batch, d.c_out, d.h, d.w], out))
            }
            Op::GlobalAvgPool => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 4 {
                    return Err(AnchorError::BadShape {
                        op: "global-avg-pool",
                        shape: s.clone(),
                        reason: "expected [B,C,H,W]".into(),
                    });
                }
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = &self.nodes[inputs[0]].values;
                let inv = 1.0 / hw as f64;
                let mut out = vec![0.0; b * c];
                for i in 0..b * c {
                    let mut acc = 0.0;
                    for v in &xv[i * hw..(i + 1) * hw] {
                        acc += v;
                    }
                    out[i] = acc * inv;
                }
                Ok((vec![b, c], out))
            }
            Op::Flatten => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() < 2 {
                    return Err(AnchorError::BadShape {
                        op: "flatten",
                        shape: s.clone(),
                        reason: "expected rank >= 2".into(),
                    });
                }
                let b = s[0];
                let rest: usize = s[1..].iter().product();
                Ok((vec![b, rest], self.nodes[inputs[0]].values.clone()))
            }
            Op::L2NormalizeRows => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 2 {
                    return Err(AnchorError::BadShape {
                        op: "l2-normalize-rows",
                        shape: s.clone(),
                        reason: "expected [N,D]".into(),
                    });
                }
                let (n, d) = (s[0], s[1]);
                let xv = &self.nodes[inputs[0]].values;
                let mut out = vec![0.0; n * d];
                let mut floored = 0u64;
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        floored += 1;
                    }
                    let inv = 1.0 / (norm + 1e-12);
                    for j in 0..d {
                        out[i * d + j] = row[j] * inv;
                    }
                }
                if floored > 0 {
                    self.zero_norm_rows += floored;
                    log::debug!("l2-normalize-rows: {floored} zero-norm rows hit the 1e-12 floor");
                }
                Ok((s.clone(), out))
            }
            Op::PairwiseDot => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 2 {
                    return Err(AnchorError::BadShape {
                        op: "pairwise-dot",
                        shape: s.clone(),
                        reason: "expected [N,D]".into(),
                    });
                }
                let (n, d) = (s[0], s[1]);
                let z = &self.nodes[inputs[0]].values;
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    let zi = &z[i * d..(i + 1) * d];
                    for j in 0..n {
                        let zj = &z[j * d..(j + 1) * d];
                        let mut acc = 0.0;
                        for (a, b) in zi.iter().zip(zj) {
                            acc += a * b;
                        }
                        out[i * n + j] = acc;
                    }
                }
                Ok((vec![n, n], out))
            }
            Op::RowSum => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 2 {
                    return Err(AnchorError::BadShape {
                        op: "row-sum",
                        shape: s.clone(),
                        reason: "expected [N,M]".into(),
                    });
                }
                let (n, m) = (s[0], s[1]);
                let xv = &self.nodes[inputs[0]].values;
                let out = (0..n)
                    .map(|i| xv[i * m..(i + 1) * m].iter().sum())
                    .collect();
                Ok((vec![n], out))
            }
            Op::RowScale => {
                arity(2)?;
                let (x, v) = (inputs[0], inputs[1]);
                let (sx, sv) = (&self.nodes[x].shape, &self.nodes[v].shape);
                if sx.len() != 2 || sv.len() != 1 || sx[0] != sv[0] {
                    return Err(self.mismatch("row-scale", x, v));
                }
                let (n, m) = (sx[0], sx[1]);
                let xv = &self.nodes[x].values;
                let vv = &self.nodes[v].values;
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] = xv[i * m + j] * vv[i];
                    }
                }
                Ok((sx.clone(), out))
            }
            Op::SumAll => {
                arity(1)?;
                let xv = &self.nodes[inputs[0]].values;
                Ok((vec![1], vec![xv.iter().sum()]))
            }
            Op::LogSumExpRows => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 2 {
                    return Err(AnchorError::BadShape {
                        op: "log-sum-exp",
                        shape: s.clone(),
                        reason: "expected [N,M]".into(),
                    });
                }
                let (n, m) = (s[0], s[1]);
                let xv = &self.nodes[inputs[0]].values;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let row = &xv[i * m..(i + 1) * m];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    out[i] = mx + s.ln();
                }
                Ok((vec![n], out))
            }
            Op::ConcatRows => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                    return Err(self.mismatch("concat-rows", a, b));
                }
                let mut out = self.nodes[a].values.clone();
                out.extend_from_slice(&self.nodes[b].values);
                Ok((vec![sa[0] + sb[0], sa[1]], out))
            }
            Op::SoftmaxCrossEntropy { labels } => {
                arity(1)?;
                let s = &self.nodes[inputs[0]].shape;
                if s.len() != 2 || s[0] != labels.len() {
                    return Err(AnchorError::BadShape {
                        op: "softmax-cross-entropy",
                        shape: s.clone(),
                        reason: format!("expected [N,C] with N == {} labels", labels.len()),
                    });
                }
                let (n, c) = (s[0], s[1]);
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(AnchorError::BadShape {
                        op: "softmax-cross-entropy",
                        shape: s.clone(),
                        reason: format!("label {bad} out of range for {c} classes"),
                    });
                }
                let xv = &self.nodes[inputs[0]].values;
                let mut total = 0.0;
                for i in 0..n {
                    let row = &xv[i * c..(i + 1) * c];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse: f64 = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += lse - row[labels[i]];
                }
                Ok((vec![1], vec![total / n as f64]))
            }
        }
    }

    /// Reverse pass from a scalar root. Populates `grad` on every node that
    /// requires gradient and is reachable from the root; consumes the tape
    /// (no further ops or backward calls are accepted).
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.consumed {
            return Err(AnchorError::TapeConsumed);
        }
        let root_shape = &self.nodes[root].shape;
        if self.nodes[root].values.len() != 1 {
            return Err(AnchorError::NonScalarRoot {
                shape: root_shape.clone(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: TensorId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn sink_at(grads: &mut [Option<Vec<f64>>], iid: TensorId, len: usize) -> &mut Vec<f64> {
            grads[iid].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[id];
        let needs = |i: usize| self.nodes[node.inputs[i]].needs_grad;
        macro_rules! sink {
            ($i:expr) => {
                sink_at(
                    grads,
                    node.inputs[$i],
                    self.nodes[node.inputs[$i]].values.len(),
                )
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(1) {
                    for (d, gv) in sink!(1).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub => {
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(1) {
                    for (d, gv) in sink!(1).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul => {
                if needs(0) {
                    let bv = self.nodes[node.inputs[1]].values.clone();
                    for ((d, gv), b) in sink!(0).iter_mut().zip(g).zip(&bv) {
                        *d += gv * b;
                    }
                }
                if needs(1) {
                    let av = self.nodes[node.inputs[0]].values.clone();
                    for ((d, gv), a) in sink!(1).iter_mut().zip(g).zip(&av) {
                        *d += gv * a;
                    }
                }
            }
            Op::Recip => {
                if needs(0) {
                    let yv = node.values.clone();
                    for ((d, gv), y) in sink!(0).iter_mut().zip(g).zip(&yv) {
                        *d -= gv * y * y;
                    }
                }
            }
            Op::Log => {
                if needs(0) {
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    for ((d, gv), x) in sink!(0).iter_mut().zip(g).zip(&xv) {
                        *d += gv / x;
                    }
                }
            }
            Op::Exp => {
                if needs(0) {
                    let yv = node.values.clone();
                    for ((d, gv), y) in sink!(0).iter_mut().zip(g).zip(&yv) {
                        *d += gv * y;
                    }
                }
            }
            Op::Relu => {
                if needs(0) {
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    for ((d, gv), x) in sink!(0).iter_mut().zip(g).zip(&xv) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ScalarMul(c) => {
                if needs(0) {
                    let c = *c;
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::ScalarAdd(_) => {
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                if needs(0) && needs(1) {
                    // Both sides: compute into temporaries to satisfy the borrow
                    // checker, then accumulate in input order.
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    kernels::matmul_backward(
                        av,
                        bv,
                        g,
                        Some(&mut da),
                        Some(&mut db),
                        m,
                        k,
                        n,
                        self.precision,
                    );
                    for (d, v) in sink!(0).iter_mut().zip(&da) {
                        *d += v;
                    }
                    for (d, v) in sink!(1).iter_mut().zip(&db) {
                        *d += v;
                    }
                } else if needs(0) {
                    let bvc = bv.clone();
                    kernels::matmul_backward(
                        &[],
                        &bvc,
                        g,
                        Some(sink!(0)),
                        None,
                        m,
                        k,
                        n,
                        self.precision,
                    );
                } else if needs(1) {
                    let avc = av.clone();
                    kernels::matmul_backward(
                        &avc,
                        &[],
                        g,
                        None,
                        Some(sink!(1)),
                        m,
                        k,
                        n,
                        self.precision,
                    );
                }
            }
            Op::BiasAddRows => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(1) {
                    let db = sink!(1);
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Conv2d => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let sx = &self.nodes[x].shape;
                let d = ConvDims {
                    batch: sx[0],
                    c_in: sx[1],
                    c_out: node.shape[1],
                    h: sx[2],
                    w: sx[3],
                };
                if needs(0) {
                    let wv = self.nodes[w].values.clone();
                    kernels::conv2d_backward_input(g, &wv, sink!(0), &d, self.precision);
                }
                if needs(1) {
                    let xv = self.nodes[x].values.clone();
                    kernels::conv2d_backward_weight(&xv, g, sink!(1), &d, self.precision);
                }
            }
            Op::GlobalAvgPool => {
                if needs(0) {
                    let (b, c) = (node.shape[0], node.shape[1]);
                    let sx = &self.nodes[node.inputs[0]].shape;
                    let hw = sx[2] * sx[3];
                    let inv = 1.0 / hw as f64;
                    let dx = sink!(0);
                    for i in 0..b * c {
                        let gv = g[i] * inv;
                        for d in &mut dx[i * hw..(i + 1) * hw] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Flatten => {
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::L2NormalizeRows => {
                if needs(0) {
                    let (n, dd) = (node.shape[0], node.shape[1]);
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    let dx = sink!(0);
                    for i in 0..n {
                        let row = &xv[i * dd..(i + 1) * dd];
                        let grow = &g[i * dd..(i + 1) * dd];
                        let r: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let norm = r + 1e-12;
                        let dot: f64 = grow.iter().zip(row).map(|(gv, x)| gv * x).sum();
                        // y = x / (r + eps); dn/dx = x / r.
                        let coef = if r > 0.0 { dot / (norm * norm * r) } else { 0.0 };
                        for j in 0..dd {
                            dx[i * dd + j] += grow[j] / norm - row[j] * coef;
                        }
                    }
                }
            }
            Op::PairwiseDot => {
                if needs(0) {
                    let n = node.shape[0];
                    let dd = self.nodes[node.inputs[0]].shape[1];
                    let zv = self.nodes[node.inputs[0]].values.clone();
                    let dz = sink!(0);
                    // dZ_i = sum_j (g_ij + g_ji) z_j
                    for i in 0..n {
                        for j in 0..n {
                            let coef = g[i * n + j] + g[j * n + i];
                            if coef == 0.0 {
                                continue;
                            }
                            let zj = &zv[j * dd..(j + 1) * dd];
                            for (d, z) in dz[i * dd..(i + 1) * dd].iter_mut().zip(zj) {
                                *d += coef * z;
                            }
                        }
                    }
                }
            }
            Op::RowSum => {
                if needs(0) {
                    let n = node.shape[0];
                    let m = self.nodes[node.inputs[0]].shape[1];
                    let dx = sink!(0);
                    for i in 0..n {
                        let gv = g[i];
                        for d in &mut dx[i * m..(i + 1) * m] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::RowScale => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if needs(0) {
                    let vv = self.nodes[node.inputs[1]].values.clone();
                    let dx = sink!(0);
                    for i in 0..n {
                        let s = vv[i];
                        for (d, gv) in dx[i * m..(i + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *d += gv * s;
                        }
                    }
                }
                if needs(1) {
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    let dv = sink!(1);
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * xv[i * m + j];
                        }
                        dv[i] += acc;
                    }
                }
            }
            Op::SumAll => {
                if needs(0) {
                    let gv = g[0];
                    for d in sink!(0).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::LogSumExpRows => {
                if needs(0) {
                    let n = node.shape[0];
                    let m = self.nodes[node.inputs[0]].shape[1];
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    let yv = node.values.clone();
                    let dx = sink!(0);
                    for i in 0..n {
                        let gv = g[i];
                        for j in 0..m {
                            dx[i * m + j] += gv * (xv[i * m + j] - yv[i]).exp();
                        }
                    }
                }
            }
            Op::ConcatRows => {
                let na = self.nodes[node.inputs[0]].values.len();
                if needs(0) {
                    for (d, gv) in sink!(0).iter_mut().zip(&g[..na]) {
                        *d += gv;
                    }
                }
                if needs(1) {
                    for (d, gv) in sink!(1).iter_mut().zip(&g[na..]) {
                        *d += gv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { labels } => {
                if needs(0) {
                    let s = &self.nodes[node.inputs[0]].shape;
                    let (n, c) = (s[0], s[1]);
                    let xv = self.nodes[node.inputs[0]].values.clone();
                    let scale = g[0] / n as f64;
                    let dx = sink!(0);
                    for i in 0..n {
                        let row = &xv[i * c..(i + 1) * c];
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let ind = if j == labels[i] { 1.0 } else { 0.0 };
                            dx[i * c + j] += scale * (p - ind);
                        }
                    }
                }
            }
        }
    }

    // Ergonomic wrappers over `apply`.

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Op::Recip, &[a])
    }
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Op::Log, &[a])
    }
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn scalar_add(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.apply(Op::ScalarAdd(c), &[a])
    }
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn bias_add_rows(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::BiasAddRows, &[x, b])
    }
    pub fn conv2d(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        self.apply(Op::Conv2d, &[x, w])
    }
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::Flatten, &[x])
    }
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::L2NormalizeRows, &[x])
    }
    pub fn pairwise_dot(&mut self, z: TensorId) -> Result<TensorId> {
        self.apply(Op::PairwiseDot, &[z])
    }
    pub fn row_sum(&mut self, m: TensorId) -> Result<TensorId> {
        self.apply(Op::RowSum, &[m])
    }
    pub fn row_scale(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        self.apply(Op::RowScale, &[m, v])
    }
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Op::SumAll, &[x])
    }
    pub fn log_sum_exp_rows(&mut self, m: TensorId) -> Result<TensorId> {
        self.apply(Op::LogSumExpRows, &[m])
    }
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Op::ConcatRows, &[a, b])
    }
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        self.apply(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-9);
        assert!((v[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[4], &[1.0, -2.0, 0.5, 3.0]).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_linear_form_is_coefficients() {
        // root = dot(w, x) with w = (3, -2) => grad(x) = (3, -2)
        let mut tape = Tape::new(Precision::F64);
        let w = tape.constant(vec![3.0, -2.0], vec![2]);
        let x = tape.input(&t(&[2], &[0.7, 0.1]).with_grad());
        let prod = tape.mul(w, x).unwrap();
        let s = tape.sum_all(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -2.0]);
    }

    #[test]
    fn softmax_cross_entropy_grad_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 0.8, 0.05];
        let mut tape = Tape::new(Precision::F64);
        let l = tape.input(&t(&[1, 4], &logits).with_grad());
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap();

        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        for (j, gv) in g.iter().enumerate() {
            let p = (logits[j] - mx).exp() / denom;
            let expect = p - if j == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12, "coord {j}: {gv} vs {expect}");
        }
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // f(x) + g(x): grad is the sum of both contributions.
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[2], &[1.0, 2.0]).with_grad());
        let a = tape.scalar_mul(x, 2.0).unwrap();
        let b = tape.scalar_mul(x, 3.0).unwrap();
        let s1 = tape.sum_all(a).unwrap();
        let s2 = tape.sum_all(b).unwrap();
        let tot = tape.add(s1, s2).unwrap();
        tape.backward(tot).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AnchorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[2], &[1.0, 2.0]).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AnchorError::TapeConsumed)));
        assert!(matches!(tape.relu(x), Err(AnchorError::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(vec![0.0; 6], vec![2, 3]);
        let b = tape.constant(vec![0.0; 6], vec![3, 2]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(vec![0.0], vec![1]);
        let err = tape.log(a).unwrap_err();
        assert!(matches!(err, AnchorError::NonFinite { op: "log" }));
    }

    #[test]
    fn forward_is_deterministic_within_a_precision_mode() {
        for p in [Precision::F32, Precision::F64] {
            let mut rng = crate::rng::StreamRng::new(9);
            let xv: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
            let wv: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.normal()).collect();
            let run = || {
                let mut tape = Tape::new(p);
                let x = tape.constant(xv.clone(), vec![1, 2, 3, 4]);
                let w = tape.constant(wv.clone(), vec![2, 2, 3, 3]);
                let c = tape.conv2d(x, w).unwrap();
                let r = tape.relu(c).unwrap();
                let gp = tape.global_avg_pool(r).unwrap();
                tape.value(gp).to_vec()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn matmul_backward_both_sides() {
        // c = a @ b, loss = sum(c); da = ones @ b^T, db = a^T @ ones.
        let mut tape = Tape::new(Precision::F64);
        let a = tape.input(&t(&[1, 2], &[1.0, 2.0]).with_grad());
        let b = tape.input(&t(&[2, 1], &[3.0, 4.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_matches_direct_evaluation() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![2, 3]);
        let y = tape.log_sum_exp_rows(x).unwrap();
        let expect0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let expect1 = ((-1f64).exp() + 0f64.exp() + 1f64.exp()).ln();
        let v = tape.value(y);
        assert!((v[0] - expect0).abs() < 1e-12);
        assert!((v[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn f32_mode_quantizes_leaves_and_outputs() {
        let mut tape = Tape::new(Precision::F32);
        let x = tape.constant(vec![0.1, 0.2, 0.3], vec![3]);
        for v in tape.value(x) {
            assert_eq!(*v, *v as f32 as f64);
        }
        let y = tape.scalar_mul(x, 1.0 / 3.0).unwrap();
        for v in tape.value(y) {
            assert_eq!(*v, *v as f32 as f64);
        }
    }
}

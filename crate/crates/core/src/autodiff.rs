//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation records the
//! node indices of its inputs, so arena order is already a topological order
//! and [`Graph::backward`] walks it in reverse. Gradients persist on the nodes
//! and accumulate across repeated `backward` calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Mask(Var, Tensor),
    MatMul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    SelectAxis1 {
        x: Var,
        index: usize,
    },
    StackAxis1(Vec<Var>),
    ExpandAxis1(Var),
    SoftmaxLast(Var),
    WeightedSumAxis1 {
        weights: Var,
        values: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    MaxAxis1 {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, x)
            | Op::Mask(x, _)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::SliceLast { x, .. }
            | Op::SelectAxis1 { x, .. }
            | Op::ExpandAxis1(x)
            | Op::SoftmaxLast(x)
            | Op::MaxAxis1 { x, .. } => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } | Op::StackAxis1(inputs) => inputs.clone(),
            Op::WeightedSumAxis1 { weights, values } => vec![*weights, *values],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Geometry of a "same"-padded 2-D cross-correlation over `(B, H, W, C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub filters: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent and leading pad of a "same" convolution along one axis.
pub fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Counters from one [`Graph::backward`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub visited: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn bcast_len(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Some(a.to_vec());
    }
    if a.len() <= b.len() && b[b.len() - a.len()..] == *a {
        return Some(b.to_vec());
    }
    None
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match op {
            UnaryOp::Relu => xv.map(|v| if v > 0.0 { v } else { 0.0 }),
            UnaryOp::Tanh => xv.map(f64::tanh),
            UnaryOp::Sigmoid => xv.map(sigmoid),
            UnaryOp::Exp => xv.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                xv.map(f64::ln)
            }
            UnaryOp::Scale(c) => xv.map(|v| v * c),
        };
        Ok(self.push(out, Op::Unary(op, x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x).expect("relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), x).expect("scale is total")
    }

    /// Binary op with trailing-axis broadcasting: one operand's shape must
    /// equal the other's or be a suffix of it.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = bcast_len(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape("elementwise", av.shape(), bv.shape()))?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len(), bd.len());
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplies by a fixed mask (dropout); the mask is not differentiated.
    pub fn mask_apply(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::shape("mask_apply", xv.shape(), mask.shape()));
        }
        let data = xv.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mask(x, mask)))
    }

    // ---- linear algebra and shape ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = self.value(x).len() / b;
        self.reshape(x, vec![b, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Domain {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut extent = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[..., start..start+len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        if len == 0 || start + len > n {
            return Err(Error::Domain {
                op: "slice_last",
                msg: format!("range {start}..{} outside last axis of {s:?}", start + len),
            });
        }
        let rows = self.value(x).len() / n;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, start }))
    }

    /// `x[:, index, ...]` for `x` of shape `(B, T, ...)`.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[1] {
            return Err(Error::Domain {
                op: "select_axis1",
                msg: format!("index {index} invalid for shape {s:?}"),
            });
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * inner);
        for b in 0..s[0] {
            let off = (b * s[1] + index) * inner;
            data.extend_from_slice(&src[off..off + inner]);
        }
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&s[2..]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SelectAxis1 { x, index }))
    }

    /// Stacks `(B, ...)` inputs into `(B, T, ...)`.
    pub fn stack_axis1(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero inputs".into()))?;
        let s = self.shape(*first).to_vec();
        for v in inputs {
            if self.shape(*v) != s.as_slice() {
                return Err(Error::shape("stack_axis1", &s, self.shape(*v)));
            }
        }
        let t = inputs.len();
        let inner: usize = s[1..].iter().product();
        let mut data = vec![0.0; s[0] * t * inner];
        for (ti, v) in inputs.iter().enumerate() {
            let src = self.value(*v).data();
            for b in 0..s[0] {
                let dst = (b * t + ti) * inner;
                data[dst..dst + inner].copy_from_slice(&src[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![s[0], t];
        shape.extend_from_slice(&s[1..]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::StackAxis1(inputs.to_vec())))
    }

    /// Repeats `(B, ...)` into `(B, T, ...)`.
    pub fn expand_axis1(&mut self, x: Var, t: usize) -> Result<Var> {
        if t == 0 {
            return Err(Error::Contract("expand_axis1 with zero repeats".into()));
        }
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * t * inner);
        for b in 0..s[0] {
            for _ in 0..t {
                data.extend_from_slice(&src[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![s[0], t];
        shape.extend_from_slice(&s[1..]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ExpandAxis1(x)))
    }

    // ---- nn-specific ---------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxLast(x))
    }

    /// `out[b] = Σ_t weights[b, t] · values[b, t, ...]`.
    pub fn weighted_sum_axis1(&mut self, weights: Var, values: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let vs = self.shape(values).to_vec();
        if ws.len() != 2 || vs.len() < 3 || vs[..2] != ws[..] {
            return Err(Error::shape("weighted_sum_axis1", &ws, &vs));
        }
        let (b, t) = (ws[0], ws[1]);
        let inner: usize = vs[2..].iter().product();
        let (wd, vd) = (self.value(weights).data(), self.value(values).data());
        let mut data = vec![0.0; b * inner];
        for bi in 0..b {
            let out = &mut data[bi * inner..(bi + 1) * inner];
            for ti in 0..t {
                let w = wd[bi * t + ti];
                let row = &vd[(bi * t + ti) * inner..(bi * t + ti + 1) * inner];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&vs[2..]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::WeightedSumAxis1 { weights, values }))
    }

    /// Same-padded cross-correlation of `x: (B, H, W, C)` with
    /// `w: (KH, KW, C, F)` plus bias `b: (F)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] || bs != [ws[3]] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (out_h, pad_top) = same_padding(xs[1], ws[0], stride.0);
        let (out_w, pad_left) = same_padding(xs[2], ws[1], stride.1);
        let geom = ConvGeometry {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: xs[3],
            k_h: ws[0],
            k_w: ws[1],
            filters: ws[3],
            stride_h: stride.0,
            stride_w: stride.1,
            out_h,
            out_w,
            pad_top,
            pad_left,
        };
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::new(vec![geom.batch, out_h, out_w, geom.filters], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Max over axis 1 of `(B, T, C)`; ties go to the earliest position.
    pub fn max_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Domain {
                op: "max_axis1",
                msg: format!("expected (B, T, C), got {s:?}"),
            });
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let v = src[(bi * t + ti) * c + ci];
                    if v > data[bi * c + ci] {
                        data[bi * c + ci] = v;
                        argmax[bi * c + ci] = ti;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(out, Op::MaxAxis1 { x, argmax }))
    }

    /// Row lookup into `table: (V, E)`; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let (v, e) = (ts[0], ts[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", lead, &[ids.len()]));
        }
        let src = self.value(table).data();
        let mut data = vec![0.0; ids.len() * e];
        for (i, id) in ids.iter().enumerate() {
            if let Some(r) = *id {
                if r >= v {
                    return Err(Error::Domain {
                        op: "gather",
                        msg: format!("row {r} out of range for table of {v} rows"),
                    });
                }
                data[i * e..(i + 1) * e].copy_from_slice(&src[r * e..(r + 1) * e]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(e);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, k] = lv.dims2("softmax_xent")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_xent", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain {
                op: "softmax_xent",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = lv.row(bi);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d(root)/d(node) into every reachable node that requires
    /// a gradient. `root` must hold a single value.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                rv.shape()
            )));
        }
        let n = root.0 + 1;
        let mut reachable = vec![false; n];
        reachable[root.0] = true;
        for i in (0..n).rev() {
            if reachable[i] {
                for p in self.nodes[i].op.parents() {
                    reachable[p.0] = true;
                }
            }
        }

        let mut local: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        local[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        let mut stats = BackwardStats::default();
        for i in (0..n).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            stats.visited += 1;
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            local[i] = Some(g);
        }

        for (i, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(stats)
    }

    fn propagate(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(local, *x) {
                    for j in 0..gx.len() {
                        gx[j] += gd[j]
                            * match op {
                                UnaryOp::Relu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Tanh => 1.0 - y[j] * y[j],
                                UnaryOp::Sigmoid => y[j] * (1.0 - y[j]),
                                UnaryOp::Exp => y[j],
                                UnaryOp::Log => 1.0 / xv[j],
                                UnaryOp::Scale(c) => *c,
                            };
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (ad.len(), bd.len());
                if let Some(ga) = self.slot(local, *a) {
                    for (j, &gj) in gd.iter().enumerate() {
                        ga[j % la] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gj,
                            BinaryOp::Mul => gj * bd[j % lb],
                        };
                    }
                }
                if let Some(gb) = self.slot(local, *b) {
                    for (j, &gj) in gd.iter().enumerate() {
                        gb[j % lb] += match op {
                            BinaryOp::Add => gj,
                            BinaryOp::Sub => -gj,
                            BinaryOp::Mul => gj * ad[j % la],
                        };
                    }
                }
            }
            Op::Mask(x, mask) => {
                if let Some(gx) = self.slot(local, *x) {
                    for ((o, gj), m) in gx.iter_mut().zip(gd).zip(mask.data()) {
                        *o += gj * m;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let nn = bv.shape()[1];
                if let Some(ga) = self.slot(local, *a) {
                    matmul_a_bt_into(gd, bv.data(), ga, m, nn, k);
                }
                if let Some(gb) = self.slot(local, *b) {
                    matmul_at_b_into(av.data(), gd, gb, m, k, nn);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(local, *x) {
                    for o in gx.iter_mut() {
                        *o += gd[0];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(local, *x) {
                    for (o, gj) in gx.iter_mut().zip(gd) {
                        *o += gj;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = self.slot(local, *v) {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            for (d, s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::SliceLast { x, start } => {
                let n_in = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(local, *x) {
                    for r in 0..gd.len() / len {
                        for c in 0..len {
                            gx[r * n_in + start + c] += gd[r * len + c];
                        }
                    }
                }
            }
            Op::SelectAxis1 { x, index } => {
                let s = self.shape(*x).to_vec();
                let inner: usize = s[2..].iter().product();
                if let Some(gx) = self.slot(local, *x) {
                    for b in 0..s[0] {
                        let off = (b * s[1] + index) * inner;
                        for c in 0..inner {
                            gx[off + c] += gd[b * inner + c];
                        }
                    }
                }
            }
            Op::StackAxis1(inputs) => {
                let s = node.value.shape();
                let (b, t) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                for (ti, v) in inputs.iter().enumerate() {
                    if let Some(gv) = self.slot(local, *v) {
                        for bi in 0..b {
                            let src = (bi * t + ti) * inner;
                            for c in 0..inner {
                                gv[bi * inner + c] += gd[src + c];
                            }
                        }
                    }
                }
            }
            Op::ExpandAxis1(x) => {
                let s = node.value.shape();
                let (b, t) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                if let Some(gx) = self.slot(local, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let src = (bi * t + ti) * inner;
                            for c in 0..inner {
                                gx[bi * inner + c] += gd[src + c];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                let k = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(local, *x) {
                    for r in 0..gd.len() / k {
                        let yr = &y[r * k..(r + 1) * k];
                        let gr = &gd[r * k..(r + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..k {
                            gx[r * k + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::WeightedSumAxis1 { weights, values } => {
                let ws = self.shape(*weights);
                let (b, t) = (ws[0], ws[1]);
                let inner = node.value.len() / b;
                let wd = self.value(*weights).data();
                let vd = self.value(*values).data();
                if let Some(gw) = self.slot(local, *weights) {
                    for bi in 0..b {
                        let gr = &gd[bi * inner..(bi + 1) * inner];
                        for ti in 0..t {
                            let row = &vd[(bi * t + ti) * inner..(bi * t + ti + 1) * inner];
                            gw[bi * t + ti] += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = self.slot(local, *values) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let w = wd[bi * t + ti];
                            let off = (bi * t + ti) * inner;
                            for c in 0..inner {
                                gv[off + c] += w * gd[bi * inner + c];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if let Some(gb) = self.slot(local, *b) {
                    for chunk in gd.chunks(geom.filters) {
                        for (o, gj) in gb.iter_mut().zip(chunk) {
                            *o += gj;
                        }
                    }
                }
                if let Some(gx) = self.slot(local, *x) {
                    conv2d_backward_input(geom, gd, wd, gx);
                }
                if let Some(gw) = self.slot(local, *w) {
                    conv2d_backward_weight(geom, gd, xd, gw);
                }
            }
            Op::MaxAxis1 { x, argmax } => {
                let s = self.shape(*x);
                let (t, c) = (s[1], s[2]);
                if let Some(gx) = self.slot(local, *x) {
                    for (j, &ti) in argmax.iter().enumerate() {
                        let (bi, ci) = (j / c, j % c);
                        gx[(bi * t + ti) * c + ci] += gd[j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = self.shape(*table)[1];
                if let Some(gt) = self.slot(local, *table) {
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(r) = *id {
                            for c in 0..e {
                                gt[r * e + c] += gd[i * e + c];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = gd[0] / b as f64;
                if let Some(gl) = self.slot(local, *logits) {
                    for (bi, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[bi * k + c] += scale * (probs.data()[bi * k + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Lazily zero-initialised local gradient buffer for `v`, or `None` when
    /// `v` does not take a gradient.
    fn slot<'a>(&self, local: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let t = local[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        Some(t.data_mut())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn conv_taps(geom: &ConvGeometry, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
    (0..geom.k_h).flat_map(move |ky| {
        (0..geom.k_w).filter_map(move |kx| {
            let iy = (oy * geom.stride_h + ky).checked_sub(geom.pad_top)?;
            let ix = (ox * geom.stride_w + kx).checked_sub(geom.pad_left)?;
            (iy < geom.in_h && ix < geom.in_w).then_some((ky, kx, iy, ix))
        })
    })
}

fn conv2d_forward(geom: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (c, f) = (geom.in_c, geom.filters);
    let mut out = vec![0.0; geom.batch * geom.out_h * geom.out_w * f];
    for bi in 0..geom.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let o_off = ((bi * geom.out_h + oy) * geom.out_w + ox) * f;
                let o = &mut out[o_off..o_off + f];
                o.copy_from_slice(b);
                for (ky, kx, iy, ix) in conv_taps(geom, oy, ox) {
                    let x_off = ((bi * geom.in_h + iy) * geom.in_w + ix) * c;
                    let w_off = (ky * geom.k_w + kx) * c * f;
                    for ci in 0..c {
                        let xv = x[x_off + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let w_row = &w[w_off + ci * f..w_off + (ci + 1) * f];
                        for (ov, wv) in o.iter_mut().zip(w_row) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(geom: &ConvGeometry, g: &[f64], w: &[f64], gx: &mut [f64]) {
    let (c, f) = (geom.in_c, geom.filters);
    for bi in 0..geom.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let o_off = ((bi * geom.out_h + oy) * geom.out_w + ox) * f;
                let go = &g[o_off..o_off + f];
                for (ky, kx, iy, ix) in conv_taps(geom, oy, ox) {
                    let x_off = ((bi * geom.in_h + iy) * geom.in_w + ix) * c;
                    let w_off = (ky * geom.k_w + kx) * c * f;
                    for ci in 0..c {
                        let w_row = &w[w_off + ci * f..w_off + (ci + 1) * f];
                        gx[x_off + ci] += go.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(geom: &ConvGeometry, g: &[f64], x: &[f64], gw: &mut [f64]) {
    let (c, f) = (geom.in_c, geom.filters);
    for bi in 0..geom.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let o_off = ((bi * geom.out_h + oy) * geom.out_w + ox) * f;
                let go = &g[o_off..o_off + f];
                for (ky, kx, iy, ix) in conv_taps(geom, oy, ox) {
                    let x_off = ((bi * geom.in_h + iy) * geom.in_w + ix) * c;
                    let w_off = (ky * geom.k_w + kx) * c * f;
                    for ci in 0..c {
                        let xv = x[x_off + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let gw_row = &mut gw[w_off + ci * f..w_off + (ci + 1) * f];
                        for (o, gv) in gw_row.iter_mut().zip(go) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! Each operation evaluates eagerly when it is recorded, so the tape order is
//! a topological order of the computation. [`Graph::backward`] walks the tape
//! once, from the requested node down to the first leaf, accumulating
//! gradients additively into every node with more than one consumer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable weight; always receives a gradient.
    Parameter,
    /// Differentiable input (for example a latent being inverted).
    Input,
    /// Data or a detached value; never receives a gradient.
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    BroadcastRows(NodeId),
    RowSums(NodeId),
    Sum(NodeId),
    Concat(NodeId, NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner tape. Build it, call `backward` on a scalar, drop it.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> NodeId {
        let requires_grad = kind != LeafKind::Constant;
        self.nodes.push(Node {
            value,
            op: Op::Leaf(kind),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId], name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// `x * w^T + b` with `x: B x in`, `w: out x in`, `b: 1 x out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(shape_err(
                "affine",
                format!("input has {} features, weight expects {}", xv.cols(), wv.cols()),
            ));
        }
        let (rows, fan_in, fan_out) = (xv.rows(), wv.cols(), wv.rows());
        let mut out = Tensor::zeros(rows, fan_out);
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape([1, fan_out], "affine bias")?;
            for r in 0..rows {
                out.row_slice_mut(r).copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        let od = out.data_mut();
        for r in 0..rows {
            let xr = &xd[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                od[r * fan_out + o] += dot(xr, &wd[o * fan_in..(o + 1) * fan_in]);
            }
        }
        let parents: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Affine { x, w, b }, &parents, "affine")
    }

    fn unary(&mut self, x: NodeId, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(x).map(f);
        self.push(v, op, &[x], name)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x), "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Exp(x), "exp", libm::exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Log(x), "log", libm::log)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    /// Square root; its derivative at zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sqrt(x), "sqrt", libm::sqrt)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, k), "scale", |v| v * k)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.unary(x, Op::AddScalar(x), "add_scalar", |v| v + k)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_slice_mut(r));
        }
        self.push(v, Op::Softmax(x), &[x], "softmax")
    }

    /// Row-wise log-softmax, computed with the max shift.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|e| *e -= lse);
        }
        self.push(v, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(v, op, &[a, b], name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(shape_err("broadcast_rows", format!("expected a row, got {} rows", xv.rows())));
        }
        let mut data = Vec::with_capacity(rows * xv.cols());
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let v = Tensor::from_vec(rows, xv.cols(), data)?;
        self.push(v, Op::BroadcastRows(x), &[x], "broadcast_rows")
    }

    /// `B x n -> B x 1`.
    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row_slice(r).iter().sum()).collect();
        let v = Tensor::from_vec(xv.rows(), 1, data)?;
        self.push(v, Op::RowSums(x), &[x], "row_sums")
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::row(&[self.value(x).sum()]);
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat", format!("{} rows vs {} rows", av.rows(), bv.rows())));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let v = Tensor::from_vec(av.rows(), cols, data)?;
        self.push(v, Op::Concat(a, b), &[a, b], "concat")
    }

    /// Backward pass from a `1 x 1` scalar.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let seed = match self.nodes.get(output.0) {
            Some(n) => {
                n.value.expect_shape([1, 1], "backward")?;
                Tensor::row(&[1.0])
            }
            None => return Err(Error::BackwardBeforeForward(output.0)),
        };
        self.backward_with(output, seed)
    }

    /// Backward pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: NodeId, output_grad: Tensor) -> Result<Gradients> {
        let Some(out) = self.nodes.get(output.0) else {
            return Err(Error::BackwardBeforeForward(output.0));
        };
        output_grad.expect_shape(out.value.shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(output_grad);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(kind) = node.op {
                if kind != LeafKind::Constant && grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let y = &node.value;
        match node.op {
            Op::Leaf(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (rows, fan_in, fan_out) = (xv.rows(), wv.cols(), wv.rows());
                if wants(x) {
                    let mut gx = Tensor::zeros(rows, fan_in);
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let out = gx.row_slice_mut(r);
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, wv.row_slice(o), out);
                            }
                        }
                    }
                    accumulate(grads, x, gx);
                }
                if wants(w) {
                    let mut gw = Tensor::zeros(fan_out, fan_in);
                    for r in 0..rows {
                        let xr = xv.row_slice(r);
                        for (o, &go) in g.row_slice(r).iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, xr, gw.row_slice_mut(o));
                            }
                        }
                    }
                    accumulate(grads, w, gw);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    accumulate(grads, b, column_sums(g));
                }
            }
            Op::Relu(x) => {
                let gx = zip(g, val(x), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                accumulate(grads, x, gx);
            }
            Op::Sigmoid(x) => accumulate(grads, x, zip(g, y, |gi, s| gi * s * (1.0 - s))),
            Op::Exp(x) => accumulate(grads, x, zip(g, y, |gi, e| gi * e)),
            Op::Log(x) => accumulate(grads, x, zip(g, val(x), |gi, xi| gi / xi)),
            Op::Square(x) => accumulate(grads, x, zip(g, val(x), |gi, xi| 2.0 * gi * xi)),
            Op::Sqrt(x) => {
                let gx = zip(g, y, |gi, s| if s > 0.0 { 0.5 * gi / s } else { 0.0 });
                accumulate(grads, x, gx);
            }
            Op::Softmax(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let inner = dot(yr, gr);
                    for ((o, &yi), &gi) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::LogSoftmax(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gi - libm::exp(yi) * total;
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, zip(g, val(b), |gi, bi| gi * bi));
                }
                if wants(b) {
                    accumulate(grads, b, zip(g, val(a), |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    accumulate(grads, a, zip(g, val(b), |gi, bi| gi / bi));
                }
                if wants(b) {
                    // d(a/b)/db = -y / b
                    let t = zip(g, y, |gi, yi| gi * yi);
                    accumulate(grads, b, zip(&t, val(b), |ti, bi| -ti / bi));
                }
            }
            Op::Scale(x, k) => accumulate(grads, x, g.map(|v| v * k)),
            Op::AddScalar(x) => accumulate(grads, x, g.clone()),
            Op::BroadcastRows(x) => accumulate(grads, x, column_sums(g)),
            Op::RowSums(x) => {
                let xv = val(x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gi = g.get(r, 0);
                    gx.row_slice_mut(r).iter_mut().for_each(|v| *v = gi);
                }
                accumulate(grads, x, gx);
            }
            Op::Sum(x) => {
                let xv = val(x);
                accumulate(grads, x, Tensor::filled(xv.rows(), xv.cols(), g.get(0, 0)));
            }
            Op::Concat(a, b) => {
                let split = val(a).cols();
                let rows = g.rows();
                let mut ga = Tensor::zeros(rows, split);
                let mut gb = Tensor::zeros(rows, g.cols() - split);
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    ga.row_slice_mut(r).copy_from_slice(&gr[..split]);
                    gb.row_slice_mut(r).copy_from_slice(&gr[split..]);
                }
                if wants(a) {
                    accumulate(grads, a, ga);
                }
                if wants(b) {
                    accumulate(grads, b, gb);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let gx = zip(g, val(x), |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 });
                accumulate(grads, x, gx);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape by construction")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        axpy(1.0, g.row_slice(r), out.data_mut());
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => axpy(1.0, g.data(), existing.data_mut()),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(v.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - m);
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

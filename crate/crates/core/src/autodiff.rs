//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a list of op records built once and evaluated many times.
//! Node ids are handed out in construction order and every op only refers
//! to ids that already exist, so the list is a topological order and cannot
//! contain cycles. [`Graph::forward`] evaluates it against a set of leaf
//! [`Bindings`] and returns an [`Evaluation`] that caches every intermediate
//! value; [`Evaluation::backward`] walks those records once in reverse.
//!
//! Broadcasting is limited to adding a row-vector bias to a matrix.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameters.
    Param,
    /// Data fed into the graph. Still differentiable (PGD needs input gradients).
    Input,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather(NodeId, Vec<usize>),
    Maximum(NodeId, NodeId),
    KlDiv(NodeId, NodeId),
    StopGradient(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Clamp(..) => "clamp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather(..) => "gather",
            Op::Maximum(..) => "maximum",
            Op::KlDiv(..) => "kl_div",
            Op::StopGradient(_) => "stop_gradient",
        }
    }
}

/// An immutable-after-construction computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

/// Leaf values for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, id: NodeId, value: Tensor) -> Self {
        self.values.insert(id, value);
        self
    }

    pub fn set(&mut self, id: NodeId, value: Tensor) {
        self.values.insert(id, value);
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(&id)
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

    fn push(&mut self, op: Op) -> NodeId {
        let n = self.nodes.len();
        let check = |id: &NodeId| assert!(id.0 < n, "node {} does not belong to this graph", id.0);
        match &op {
            Op::Leaf { .. } | Op::Const(_) => {}
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Maximum(a, b)
            | Op::KlDiv(a, b) => {
                check(a);
                check(b);
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, ..)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _)
            | Op::StopGradient(a) => check(a),
        }
        self.nodes.push(op);
        NodeId(n)
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into(), kind: LeafKind::Param })
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into(), kind: LeafKind::Input })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// `a[m, n] + bias[n]`, the bias repeated on every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp bounds out of order");
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Row-wise log-softmax of a vector or matrix.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Picks `a[i, index[i]]` for every row `i`.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        self.push(Op::Gather(a, index))
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Maximum(a, b))
    }

    /// Per-row `KL(p || q)` given log-probability rows `log_p` and `log_q`.
    pub fn kl_div(&mut self, log_p: NodeId, log_q: NodeId) -> NodeId {
        self.push(Op::KlDiv(log_p, log_q))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient(a))
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match &self.nodes[id.0] {
            Op::Leaf { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf { .. }))
            .map(|(i, _)| NodeId(i))
    }

    /// Evaluates every node in order, caching all intermediate values.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let v = eval_op(i, op, &values, bindings)?;
            if !v.all_finite() {
                return Err(Error::NonFinite { node: i, op: op.name() });
            }
            values.push(v);
        }
        Ok(Evaluation { graph: self, values })
    }
}

/// Cached result of one forward pass.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl<'g> Evaluation<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// The value of the last node added to the graph.
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("empty graph")
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        let nodes = &self.graph.nodes;
        if !self.values[root.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward root node {} must be scalar, has shape {:?}",
                root.0,
                self.values[root.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.values[root.0].shape(), 1.0));
        let mut leaf_grads = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = &self.values[i];
            match &nodes[i] {
                Op::Leaf { .. } => {
                    leaf_grads.insert(NodeId(i), g);
                }
                Op::Const(_) | Op::StopGradient(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = dot(grow, brow);
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = ad[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += s * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga));
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, gb));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (dst, v) in gb.iter_mut().zip(g.row(r)) {
                            *dst += v;
                        }
                    }
                    let shape = self.values[bias.0].shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::new(shape, gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.values[b.0], |x, y| x * y);
                    let gb = g.zip_map(&self.values[a.0], |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|v| v * c)),
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.values[a.0], |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(out, |x, y| x * y)),
                Op::Log(a) => accumulate(&mut grads, *a, g.zip_map(&self.values[a.0], |x, y| x / y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(&self.values[a.0], |x, y| if y >= lo && y <= hi { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols();
                    let mut ga = g.clone();
                    for r in 0..out.rows() {
                        let grow = g.row(r);
                        let total: f64 = grow.iter().sum();
                        let orow = out.row(r);
                        let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, &gv), &lp) in dst.iter_mut().zip(grow).zip(orow) {
                            *d = gv - lp.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, Tensor::full(self.values[a.0].shape(), s));
                }
                Op::Mean(a) => {
                    let av = &self.values[a.0];
                    let s = g.item() / av.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), s));
                }
                Op::Gather(a, index) => {
                    let av = &self.values[a.0];
                    let cols = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (r, (&k, &gv)) in index.iter().zip(g.data()).enumerate() {
                        ga.data_mut()[r * cols + k] += gv;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let mut ga = g.clone();
                    let mut gb = g;
                    for ((x, y), (da, db)) in av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .zip(ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()))
                    {
                        if x >= y {
                            *db = 0.0;
                        } else {
                            *da = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::KlDiv(lp, lq) => {
                    let (pv, qv) = (&self.values[lp.0], &self.values[lq.0]);
                    let cols = pv.cols();
                    let mut gp = Tensor::zeros(pv.shape());
                    let mut gq = Tensor::zeros(qv.shape());
                    for r in 0..pv.rows() {
                        let gr = g.data()[r];
                        for c in 0..cols {
                            let j = r * cols + c;
                            let (p_log, q_log) = (pv.data()[j], qv.data()[j]);
                            let p = p_log.exp();
                            gp.data_mut()[j] = gr * p * (p_log - q_log + 1.0);
                            gq.data_mut()[j] = -gr * p;
                        }
                    }
                    accumulate(&mut grads, *lp, gp);
                    accumulate(&mut grads, *lq, gq);
                }
            }
        }

        for leaf in self.graph.leaves() {
            leaf_grads
                .entry(leaf)
                .or_insert_with(|| Tensor::zeros(self.values[leaf.0].shape()));
        }
        Ok(GradientMap { grads: leaf_grads })
    }
}

/// Gradients of a scalar root with respect to every leaf of the graph.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for a leaf; panics when `id` is not a leaf of the graph.
    pub fn of(&self, id: NodeId) -> &Tensor {
        self.grads.get(&id).unwrap_or_else(|| panic!("node {} is not a leaf", id.0))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads.remove(&id).unwrap_or_else(|| panic!("node {} is not a leaf", id.0))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (d, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *d += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape { node, op: op.name(), detail }
}

fn same_shape(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval_op(i: usize, op: &Op, values: &[Tensor], bindings: &Bindings) -> Result<Tensor> {
    let v = |id: &NodeId| &values[id.0];
    Ok(match op {
        Op::Leaf { name, .. } => bindings
            .get(NodeId(i))
            .cloned()
            .ok_or_else(|| Error::Contract(format!("leaf `{name}` (node {i}) is unbound")))?,
        Op::Const(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(i, op, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let orow = &mut out[r * n..(r + 1) * n];
                for p in 0..k {
                    let s = ad[r * k + p];
                    if s == 0.0 {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += s * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Maximum(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape(i, op, a, b)?;
            match op {
                Op::Add(..) => a.zip_map(b, |x, y| x + y),
                Op::Sub(..) => a.zip_map(b, |x, y| x - y),
                Op::Mul(..) => a.zip_map(b, |x, y| x * y),
                _ => a.zip_map(b, |x, y| if x >= y { x } else { y }),
            }
        }
        Op::AddBias(a, bias) => {
            let (a, bias) = (v(a), v(bias));
            if a.shape().len() != 2 || bias.numel() != a.shape()[1] || bias.rows() != 1 {
                return Err(shape_err(i, op, format!("bias {:?} does not fit rows of {:?}", bias.shape(), a.shape())));
            }
            let n = a.shape()[1];
            let mut out = a.clone();
            for (j, x) in out.data_mut().iter_mut().enumerate() {
                *x += bias.data()[j % n];
            }
            out
        }
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
        Op::LogSoftmax(a) => {
            let a = v(a);
            if a.shape().len() > 2 || a.shape().is_empty() {
                return Err(shape_err(i, op, format!("expects a vector or matrix, got {:?}", a.shape())));
            }
            let mut out = a.clone();
            let cols = a.cols();
            for r in 0..a.rows() {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                log_softmax_in_place(row);
            }
            out
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => {
            let a = v(a);
            Tensor::scalar(a.sum() / a.numel() as f64)
        }
        Op::Gather(a, index) => {
            let a = v(a);
            if a.shape().len() > 2 || index.len() != a.rows() || index.iter().any(|&k| k >= a.cols()) {
                return Err(shape_err(
                    i,
                    op,
                    format!("{} indices into {:?} (max index {:?})", index.len(), a.shape(), index.iter().max()),
                ));
            }
            let cols = a.cols();
            let data = index.iter().enumerate().map(|(r, &k)| a.data()[r * cols + k]).collect();
            Tensor::new(vec![index.len()], data)?
        }
        Op::KlDiv(p, q) => {
            let (p, q) = (v(p), v(q));
            same_shape(i, op, p, q)?;
            if p.shape().len() > 2 || p.shape().is_empty() {
                return Err(shape_err(i, op, format!("expects log-probability rows, got {:?}", p.shape())));
            }
            let data = (0..p.rows())
                .map(|r| p.row(r).iter().zip(q.row(r)).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum())
                .collect();
            Tensor::new(vec![p.rows()], data)?
        }
        Op::StopGradient(a) => v(a).clone(),
    })
}

/// Stable log-softmax of one row, using the max-subtraction trick.
pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

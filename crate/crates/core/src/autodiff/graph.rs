//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution order.
//! Node ids are indices into that record, so each node only ever refers to
//! nodes created before it and a reverse sweep visits them in a valid order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{mm, mm_a_bt_acc, mm_at_b_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool1d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    /// Scalar-valued function whose local gradients were computed during the
    /// forward pass; backward scales them by the upstream gradient.
    Scalar {
        inputs: Vec<NodeId>,
        local: Vec<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Dense { .. } => "dense",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Dropout { .. } => "dropout",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Scalar { .. } => "scalar",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Concat { a, b } => vec![*a, *b],
            Op::Dense { x, w, b } | Op::Conv1d { x, w, b } => vec![*x, *w, *b],
            Op::MaxPool1d { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Dropout { x, .. }
            | Op::Scale(x, _)
            | Op::Sum(x) => vec![*x],
            Op::Scalar { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if that node requires one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn expect2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::dim(op, t.shape(), &[0, 0]))
}

fn expect3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0, 0])),
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

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input node ids of `id`, in operand order.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf tensor. Leaves with `requires_grad` always receive a
    /// gradient from [`Graph::backward`], zero when unused.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x w + b` with `b` broadcast over rows.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = expect2(xv, "dense")?;
        let (d2, u) = expect2(wv, "dense")?;
        if d != d2 {
            return Err(Error::dim("dense", xv.shape(), wv.shape()));
        }
        if bv.shape() != [u] {
            return Err(Error::dim("dense", wv.shape(), bv.shape()));
        }
        let mut out = mm(xv.data(), wv.data(), n, d, u);
        for row in out.chunks_exact_mut(u) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let value = Tensor::new(vec![n, u], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    /// Valid stride-1 cross-correlation of `x [n, len, c_in]` with
    /// `w [k, c_in, c_out]`, plus bias `b [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, len, c_in) = expect3(xv, "conv1d")?;
        let (k, c_in2, c_out) = expect3(wv, "conv1d")?;
        if c_in != c_in2 {
            return Err(Error::dim("conv1d", xv.shape(), wv.shape()));
        }
        if bv.shape() != [c_out] {
            return Err(Error::dim("conv1d", wv.shape(), bv.shape()));
        }
        if len < k {
            return Err(Error::DegenerateInput {
                op: "conv1d",
                detail: format!("input length {len} shorter than kernel {k}"),
            });
        }
        let out_len = len - k + 1;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; n * out_len * c_out];
        for s in 0..n {
            for t in 0..out_len {
                let o = &mut out[(s * out_len + t) * c_out..(s * out_len + t + 1) * c_out];
                o.copy_from_slice(bv.data());
                for j in 0..k {
                    let x_row = &xd[(s * len + t + j) * c_in..(s * len + t + j + 1) * c_in];
                    for (ci, &xval) in x_row.iter().enumerate() {
                        let w_row = &wd[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                        for (ov, &wval) in o.iter_mut().zip(w_row) {
                            *ov += xval * wval;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, out_len, c_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b }))
    }

    /// Non-overlapping max pooling with window 2 along the length axis of
    /// `[n, len, c]`. A trailing odd element is dropped; ties pick the first.
    pub fn maxpool1d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, len, c) = expect3(xv, "maxpool1d")?;
        if len < 2 {
            return Err(Error::DegenerateInput {
                op: "maxpool1d",
                detail: format!("input length {len} shorter than window 2"),
            });
        }
        let out_len = len / 2;
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * out_len * c);
        let mut argmax = Vec::with_capacity(n * out_len * c);
        for s in 0..n {
            for t in 0..out_len {
                for ch in 0..c {
                    let first = (s * len + 2 * t) * c + ch;
                    let second = first + c;
                    let pick = if xd[first] >= xd[second] { first } else { second };
                    out.push(xd[pick]);
                    argmax.push(pick);
                }
            }
        }
        let value = Tensor::new(vec![n, out_len, c], out)?;
        Ok(self.push(value, Op::MaxPool1d { x, argmax }))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let width = *xv.shape().last().expect("rank >= 1");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses all axes after the first: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Joins two `[n, *]` matrices along the feature axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, da) = expect2(av, "concat")?;
        let (n2, db) = expect2(bv, "concat")?;
        if n != n2 {
            return Err(Error::dim("concat", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(vec![n, da + db], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Inverted dropout. With `rng = None` (inference) this is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(x).len();
        let mask = match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            }
            _ => vec![1.0; n],
        };
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Records a scalar function of `inputs` whose value and per-input
    /// gradients were computed by the caller.
    pub fn scalar_op(&mut self, inputs: Vec<NodeId>, value: f64, local: Vec<Tensor>) -> Result<NodeId> {
        if inputs.len() != local.len() {
            return Err(Error::Contract(format!(
                "{} inputs but {} local gradients",
                inputs.len(),
                local.len()
            )));
        }
        for (&id, g) in inputs.iter().zip(&local) {
            if self.value(id).shape() != g.shape() {
                return Err(Error::dim("scalar_op", self.value(id).shape(), g.shape()));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs, local }))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("gradient matches value"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient buffer for `id` when it needs one.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2().expect("matmul lhs");
                let m = bv.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    mm_a_bt_acc(dy, bv.data(), n, m, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    mm_at_b_acc(av.data(), dy, n, k, m, gb);
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d) = xv.dims2().expect("dense input");
                let u = wv.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    mm_a_bt_acc(dy, wv.data(), n, u, d, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    mm_at_b_acc(xv.data(), dy, n, d, u, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in dy.chunks_exact(u) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, len, c_in) = expect3(xv, "conv1d").expect("conv input");
                let (k, _, c_out) = expect3(wv, "conv1d").expect("conv weight");
                let out_len = len - k + 1;
                let (xd, wd) = (xv.data(), wv.data());
                if let Some(gx) = self.slot(grads, *x) {
                    for s in 0..n {
                        for t in 0..out_len {
                            let g = &dy[(s * out_len + t) * c_out..(s * out_len + t + 1) * c_out];
                            for j in 0..k {
                                for ci in 0..c_in {
                                    let w_row = &wd[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                                    let dot: f64 = g.iter().zip(w_row).map(|(a, b)| a * b).sum();
                                    gx[(s * len + t + j) * c_in + ci] += dot;
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for s in 0..n {
                        for t in 0..out_len {
                            let g = &dy[(s * out_len + t) * c_out..(s * out_len + t + 1) * c_out];
                            for j in 0..k {
                                for ci in 0..c_in {
                                    let xval = xd[(s * len + t + j) * c_in + ci];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let gw_row = &mut gw[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                                    for (gwv, &gv) in gw_row.iter_mut().zip(g) {
                                        *gwv += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in dy.chunks_exact(c_out) {
                        for (gbv, v) in gb.iter_mut().zip(row) {
                            *gbv += v;
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, &g) in argmax.iter().zip(dy) {
                        gx[src] += g;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv.data()).zip(dy) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, &y), &d) in gx.iter_mut().zip(node.value.data()).zip(dy) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().expect("rank >= 1");
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g_row, y_row), d_row) in gx
                        .chunks_exact_mut(width)
                        .zip(node.value.data().chunks_exact(width))
                        .zip(dy.chunks_exact(width))
                    {
                        let dot: f64 = y_row.iter().zip(d_row).map(|(a, b)| a * b).sum();
                        for ((g, &y), &d) in g_row.iter_mut().zip(y_row).zip(d_row) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Concat { a, b } => {
                let da = self.value(*a).shape()[1];
                let db = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (g_row, d_row) in ga.chunks_exact_mut(da).zip(dy.chunks_exact(da + db)) {
                        for (g, d) in g_row.iter_mut().zip(&d_row[..da]) {
                            *g += d;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (g_row, d_row) in gb.chunks_exact_mut(db).zip(dy.chunks_exact(da + db)) {
                        for (g, d) in g_row.iter_mut().zip(&d_row[da..]) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, m), d) in gx.iter_mut().zip(mask).zip(dy) {
                        *g += m * d;
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(g) = self.slot(grads, id) {
                        for (gv, d) in g.iter_mut().zip(dy) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &other), d) in ga.iter_mut().zip(bv).zip(dy) {
                        *g += other * d;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((g, &other), d) in gb.iter_mut().zip(av).zip(dy) {
                        *g += other * d;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += factor * d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::Scalar { inputs, local } => {
                for (&id, l) in inputs.iter().zip(local) {
                    if let Some(g) = self.slot(grads, id) {
                        for (gv, lv) in g.iter_mut().zip(l.data()) {
                            *gv += dy[0] * lv;
                        }
                    }
                }
            }
        }
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

use std::borrow::Cow;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption used by mutation tests of the
/// verification suites.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient flowing into the left operand of every matmul.
    MatmulLhsSignFlip,
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    LogSoftmaxRows(NodeId),
    SoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Detach,
    Quantize,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::Detach => "detach",
            Op::Quantize => "quantize",
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order; backward walks it in reverse.
///
/// Leaves may borrow their tensors so that read-only parameters are not
/// copied for every forward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    fault: Option<Fault>,
}

/// How the right operand of `add`/`mul` lines up with the left.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[1 × n]` repeated down the rows.
    Row,
    /// `[m × 1]` repeated across the columns.
    Column,
    /// single element.
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    if b.is_scalar() && b.shape().iter().all(|&d| d == 1) {
        return Ok(Broadcast::Scalar);
    }
    if a.is_matrix() && b.is_matrix() {
        if b.shape() == [1, a.cols()] {
            return Ok(Broadcast::Row);
        }
        if b.shape() == [a.rows(), 1] {
            return Ok(Broadcast::Column);
        }
    }
    Err(mismatch())
}

fn rhs_index(kind: Broadcast, cols: usize, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Column => i / cols,
        Broadcast::Scalar => 0,
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn grad_of(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf owning its tensor.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, Cow::Owned(value), true)
    }

    /// Differentiable leaf borrowing its tensor.
    pub fn param_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Op::Param, Cow::Borrowed(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Op::Constant, Cow::Borrowed(value), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.grad_of(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = tensor::matmul_into(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Op::MatMul(a, b), Cow::Owned(value), rg))
    }

    /// Elementwise sum. The right operand may be a `[1 × n]` row, an
    /// `[m × 1]` column or a single element, repeated to the left shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, av, bv)?;
        let cols = av.cols();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[rhs_index(kind, cols, i)]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(op, Cow::Owned(value), rg))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64, rg: bool) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(op, Cow::Owned(value), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let rg = self.grad_of(a);
        // `0.0` rather than `x.max(0.0)` so the result is never a negative zero
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 }, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let rg = self.grad_of(a);
        self.unary(a, Op::Exp(a), f64::exp, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let rg = self.grad_of(a);
        self.unary(a, Op::Scale(a, factor), |x| x * factor, rg)
    }

    /// Same value, no gradient to `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::Detach, Cow::Owned(value), false)
    }

    /// Applies an elementwise rounding map. Forward-only: no gradient
    /// reaches `a`.
    pub fn quantize(&mut self, a: NodeId, round: impl Fn(f64) -> f64) -> NodeId {
        self.unary(a, Op::Quantize, round, false)
    }

    fn rowwise(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<NodeId> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let cols = av.cols();
        let mut out = vec![0.0; av.len()];
        if cols > 0 {
            for (src, dst) in av.data().chunks(cols).zip(out.chunks_mut(cols)) {
                f(src, dst);
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.grad_of(a);
        Ok(self.push(op, Cow::Owned(value), rg))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, Op::LogSoftmaxRows(a), tensor::log_softmax_row)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, Op::SoftmaxRows(a), tensor::softmax_row)
    }

    /// Rows `a[indices[0]], a[indices[1]], …` stacked into a new matrix.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: av.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let cols = av.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= av.rows() {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows index {r} out of range for {} rows",
                    av.rows()
                )));
            }
            out.extend_from_slice(av.row_slice(r));
        }
        let value = Tensor::matrix(indices.len(), cols, out)?;
        let rg = self.grad_of(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), Cow::Owned(value), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.grad_of(a);
        self.push(Op::Sum(a), Cow::Owned(Tensor::scalar(total)), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let total: f64 = av.data().iter().sum();
        let value = Tensor::scalar(total / av.len() as f64);
        let rg = self.grad_of(a);
        self.push(Op::Mean(a), Cow::Owned(value), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, contribution: Vec<f64>) {
        if !self.grad_of(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.value(target).shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn reduce_broadcast(kind: Broadcast, full: &[f64], cols: usize, target: &Tensor) -> Vec<f64> {
        match kind {
            Broadcast::Same => full.to_vec(),
            _ => {
                let mut out = vec![0.0; target.len()];
                for (i, &v) in full.iter().enumerate() {
                    out[rhs_index(kind, cols, i)] += v;
                }
                out
            }
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Param | Op::Constant | Op::Detach | Op::Quantize => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.grad_of(*a) {
                    let mut da = tensor::matmul_nt(gd, bv.data(), m, n, k);
                    if self.fault == Some(Fault::MatmulLhsSignFlip) {
                        da.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.grad_of(*b) {
                    let db = tensor::matmul_tn(av.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("add", av, bv).expect("checked in forward");
                self.accumulate(grads, *a, gd.to_vec());
                if self.grad_of(*b) {
                    let db = Self::reduce_broadcast(kind, gd, av.cols(), bv);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("mul", av, bv).expect("checked in forward");
                let cols = av.cols();
                if self.grad_of(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bv.data()[rhs_index(kind, cols, i)])
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.grad_of(*b) {
                    let full: Vec<f64> = gd.iter().zip(av.data()).map(|(gv, x)| gv * x).collect();
                    let db = Self::reduce_broadcast(kind, &full, cols, bv);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = gd
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = gd.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Scale(a, factor) => {
                let da = gd.iter().map(|gv| gv * factor).collect();
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let out = node.value.data();
                let cols = node.value.cols();
                let mut da = vec![0.0; out.len()];
                for r in 0..node.value.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = gd[span.clone()].iter().sum();
                    for i in span {
                        da[i] = gd[i] - out[i].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let out = node.value.data();
                let cols = node.value.cols();
                let mut da = vec![0.0; out.len()];
                for r in 0..node.value.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = span.clone().map(|i| gd[i] * out[i]).sum();
                    for i in span {
                        da[i] = out[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut da = vec![0.0; av.len()];
                for (out_row, &src) in indices.iter().enumerate() {
                    for c in 0..cols {
                        da[src * cols + c] += gd[out_row * cols + c];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation appends one node holding its output tensor, the identifiers
//! of its inputs, and whatever intermediates its backward rule needs. The tape
//! order is the forward execution order; [`Tape::backward`] visits nodes in
//! exact reverse order and accumulates (`+=`) into each input's adjoint, so
//! running backward twice without [`Tape::zero_grads`] doubles every gradient.
//!
//! Every op output is checked for non-finite values before it is admitted to
//! the tape; a NaN or infinity is surfaced as an error rather than silently
//! propagated into training.

use alloc::vec;
use alloc::vec::Vec;

use crate::coord;
use crate::deform::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScalarKind {
    /// a + c
    Add,
    /// a * c
    Mul,
    /// c - a
    Rsub,
    /// a / c
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Log,
    Neg,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Binary {
        kind: BinKind,
        a: TensorId,
        b: TensorId,
    },
    ScalarOp {
        kind: ScalarKind,
        a: TensorId,
        c: T,
    },
    Unary {
        kind: UnaryKind,
        a: TensorId,
    },
    PowScalar {
        a: TensorId,
        p: T,
    },
    ClampMin {
        a: TensorId,
        floor: T,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    ReduceSum {
        a: TensorId,
    },
    ReduceMean {
        a: TensorId,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    SliceChannels {
        a: TensorId,
        start: usize,
        len: usize,
    },
    SoftmaxChannels {
        a: TensorId,
    },
    SelectClass {
        probs: TensorId,
        labels: Vec<u8>,
    },
    InstanceNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    UpsampleNearest2 {
        x: TensorId,
    },
    AddCoord {
        x: TensorId,
    },
    CoordPool {
        x: TensorId,
        argmax: Vec<u32>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    DeformConv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        offsets: TensorId,
        masks: TensorId,
        geom: ConvGeom,
    },
    BilinearPoint {
        x: TensorId,
        p: TensorId,
    },
}

impl<T: Scalar> Op<T> {
    fn collect_inputs(&self, out: &mut Vec<TensorId>) {
        match self {
            Op::Leaf => {}
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => {
                out.push(*a);
                out.push(*b);
            }
            Op::ScalarOp { a, .. }
            | Op::Unary { a, .. }
            | Op::PowScalar { a, .. }
            | Op::ClampMin { a, .. }
            | Op::ReduceSum { a }
            | Op::ReduceMean { a }
            | Op::SliceChannels { a, .. }
            | Op::SoftmaxChannels { a } => out.push(*a),
            Op::ConcatChannels { inputs } => out.extend_from_slice(inputs),
            Op::SelectClass { probs, .. } => out.push(*probs),
            Op::InstanceNorm { x, gamma, beta, .. } => {
                out.push(*x);
                out.push(*gamma);
                out.push(*beta);
            }
            Op::UpsampleNearest2 { x } | Op::AddCoord { x } | Op::CoordPool { x, .. } => {
                out.push(*x)
            }
            Op::Conv2d { x, w, bias, .. } => {
                out.push(*x);
                out.push(*w);
                if let Some(b) = bias {
                    out.push(*b);
                }
            }
            Op::DeformConv2d {
                x,
                w,
                bias,
                offsets,
                masks,
                ..
            } => {
                out.push(*x);
                out.push(*w);
                out.push(*offsets);
                out.push(*masks);
                if let Some(b) = bias {
                    out.push(*b);
                }
            }
            Op::BilinearPoint { x, p } => {
                out.push(*x);
                out.push(*p);
            }
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Linear tape of tensors and recorded operations.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad` accumulate
    /// gradients during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        id
    }

    /// Registers a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: T) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Validates and appends an op output. Rejects non-finite values.
    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<TensorId> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: op_name, index });
        }
        let mut inputs = Vec::new();
        op.collect_inputs(&mut inputs);
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(id)
    }

    /// Reverse sweep from a scalar root. Every `requires_grad` tensor reachable
    /// from `root` receives `d(root)/d(tensor)` accumulated into its grad.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let numel = self.nodes[root.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarRoot { numel });
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_op(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(g.iter()) {
                        *a += *gi;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn adj_buf<'a>(&self, adj: &'a mut [Option<Vec<T>>], id: TensorId) -> &'a mut [T] {
        let numel = self.nodes[id.0].value.numel();
        adj[id.0]
            .get_or_insert_with(|| vec![T::ZERO; numel])
            .as_mut_slice()
    }

    fn backward_op(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = self.nodes[i].value.shape();
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.requires_grad(*a) {
                    let da = ops::binary_backward_lhs(*kind, g, out_shape, av, bv);
                    ops::add_into(self.adj_buf(adj, *a), &da);
                }
                if self.requires_grad(*b) {
                    let db = ops::binary_backward_rhs(*kind, g, out_shape, av, bv);
                    ops::add_into(self.adj_buf(adj, *b), &db);
                }
            }
            Op::ScalarOp { kind, a, c } => {
                if self.requires_grad(*a) {
                    ops::scalar_backward(*kind, *c, g, self.adj_buf(adj, *a));
                }
            }
            Op::Unary { kind, a } => {
                if self.requires_grad(*a) {
                    let x = self.nodes[a.0].value.data();
                    let y = self.nodes[i].value.data();
                    ops::unary_backward(*kind, x, y, g, self.adj_buf(adj, *a));
                }
            }
            Op::PowScalar { a, p } => {
                if self.requires_grad(*a) {
                    ops::pow_backward(*p, self.nodes[a.0].value.data(), g, self.adj_buf(adj, *a));
                }
            }
            Op::ClampMin { a, floor } => {
                if self.requires_grad(*a) {
                    let x = self.nodes[a.0].value.data();
                    let buf = self.adj_buf(adj, *a);
                    for ((o, xi), gi) in buf.iter_mut().zip(x.iter()).zip(g.iter()) {
                        if *xi >= *floor {
                            *o += *gi;
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.requires_grad(*a) {
                    ops::matmul_backward_lhs(g, bv, *m, *k, *n, self.adj_buf(adj, *a));
                }
                if self.requires_grad(*b) {
                    ops::matmul_backward_rhs(g, av, *m, *k, *n, self.adj_buf(adj, *b));
                }
            }
            Op::ReduceSum { a } => {
                if self.requires_grad(*a) {
                    let g0 = g[0];
                    for o in self.adj_buf(adj, *a) {
                        *o += g0;
                    }
                }
            }
            Op::ReduceMean { a } => {
                if self.requires_grad(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let g0 = g[0] / T::from_f64(n as f64);
                    for o in self.adj_buf(adj, *a) {
                        *o += g0;
                    }
                }
            }
            Op::ConcatChannels { inputs } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut start = 0usize;
                for inp in inputs {
                    let c = self.nodes[inp.0].value.shape()[out_shape.len() - 3];
                    if self.requires_grad(*inp) {
                        let shape = self.nodes[inp.0].value.shape().to_vec();
                        let buf = self.adj_buf(adj, *inp);
                        ops::concat_backward_piece(g, &out_shape, &shape, start, buf);
                    }
                    start += c;
                }
            }
            Op::SliceChannels { a, start, len } => {
                if self.requires_grad(*a) {
                    let in_shape = self.nodes[a.0].value.shape().to_vec();
                    let buf = self.adj_buf(adj, *a);
                    ops::slice_backward(g, &in_shape, *start, *len, buf);
                }
            }
            Op::SoftmaxChannels { a } => {
                if self.requires_grad(*a) {
                    let s = self.nodes[i].value.data();
                    let shape = self.nodes[i].value.shape().to_vec();
                    ops::softmax_backward(s, &shape, g, self.adj_buf(adj, *a));
                }
            }
            Op::SelectClass { probs, labels } => {
                if self.requires_grad(*probs) {
                    let shape = self.nodes[probs.0].value.shape().to_vec();
                    ops::select_class_backward(labels, &shape, g, self.adj_buf(adj, *probs));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                ..
            } => {
                let xv = self.nodes[x.0].value.data();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let gv = self.nodes[gamma.0].value.data();
                let grads = ops::instance_norm_backward(
                    xv,
                    &shape,
                    gv,
                    mean,
                    inv_std,
                    g,
                    self.requires_grad(*x),
                    self.requires_grad(*gamma),
                    self.requires_grad(*beta),
                );
                if let Some(dx) = grads.dx {
                    ops::add_into(self.adj_buf(adj, *x), &dx);
                }
                if let Some(dg) = grads.dgamma {
                    ops::add_into(self.adj_buf(adj, *gamma), &dg);
                }
                if let Some(db) = grads.dbeta {
                    ops::add_into(self.adj_buf(adj, *beta), &db);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if self.requires_grad(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    ops::upsample2_backward(g, &in_shape, self.adj_buf(adj, *x));
                }
            }
            Op::AddCoord { x } => {
                if self.requires_grad(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    coord::add_coord_backward(g, &in_shape, self.adj_buf(adj, *x));
                }
            }
            Op::CoordPool { x, argmax, .. } => {
                if self.requires_grad(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    coord::coord_pool_backward(g, argmax, &in_shape, self.adj_buf(adj, *x));
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let xv = self.nodes[x.0].value.data();
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                let wv = self.nodes[w.0].value.data();
                if self.requires_grad(*x) {
                    deform::conv2d_backward_dx(g, wv, geom, &x_shape, self.adj_buf(adj, *x));
                }
                if self.requires_grad(*w) {
                    deform::conv2d_backward_dw(g, xv, geom, &x_shape, self.adj_buf(adj, *w));
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        deform::conv_backward_db(g, geom, &x_shape, self.adj_buf(adj, *b));
                    }
                }
            }
            Op::DeformConv2d {
                x,
                w,
                bias,
                offsets,
                masks,
                geom,
            } => {
                let xv = self.nodes[x.0].value.data();
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                let wv = self.nodes[w.0].value.data();
                let ov = self.nodes[offsets.0].value.data();
                let mv = self.nodes[masks.0].value.data();
                let grads = deform::deform_conv2d_backward(
                    g,
                    xv,
                    &x_shape,
                    wv,
                    ov,
                    mv,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    self.requires_grad(*offsets),
                    self.requires_grad(*masks),
                );
                if let Some(dx) = grads.dx {
                    ops::add_into(self.adj_buf(adj, *x), &dx);
                }
                if let Some(dw) = grads.dw {
                    ops::add_into(self.adj_buf(adj, *w), &dw);
                }
                if let Some(doff) = grads.doffsets {
                    ops::add_into(self.adj_buf(adj, *offsets), &doff);
                }
                if let Some(dm) = grads.dmasks {
                    ops::add_into(self.adj_buf(adj, *masks), &dm);
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        deform::conv_backward_db(g, geom, &x_shape, self.adj_buf(adj, *b));
                    }
                }
            }
            Op::BilinearPoint { x, p } => {
                let xv = self.nodes[x.0].value.data();
                let x_shape = self.nodes[x.0].value.shape().to_vec();
                let pv = self.nodes[p.0].value.data();
                if self.requires_grad(*x) {
                    deform::bilinear_point_backward_dx(g, pv, &x_shape, self.adj_buf(adj, *x));
                }
                if self.requires_grad(*p) {
                    deform::bilinear_point_backward_dp(g, xv, pv, &x_shape, self.adj_buf(adj, *p));
                }
            }
        }
    }
}

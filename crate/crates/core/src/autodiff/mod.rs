//! Reverse-mode differentiation over [`Grid`] computations.
//!
//! A [`Tape`] records every operation in creation order; a [`Var`] is a
//! handle to one recorded value. [`Tape::gradients`] runs a plain backward
//! sweep and returns grids. [`Tape::gradients_graph`] instead records the
//! backward sweep itself on the tape, so the returned gradients are `Var`s
//! that can be differentiated again. Second-order support covers the dense
//! subset (elementwise arithmetic, `matmul`, reductions, softmax, relu);
//! `conv2d`, `maxpool2` and `upsample2` are first-order only.
//!
//! ```
//! use l2s_core::autodiff::Tape;
//! use l2s_core::grid::Grid;
//!
//! let mut t = Tape::new();
//! let x = t.leaf(Grid::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = t.mul(x, x).unwrap();
//! let loss = t.sum(sq);
//! let g = t.gradients(loss, &[x]).unwrap();
//! assert_eq!(g.values[0].data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
pub mod check;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{self, Grid};

pub use check::{grad_check, relative_error, GradCheck};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    /// grid times a one-element var
    Scale(Var, Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Sum(Var),
    Expand(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumAxis0(Var),
    BroadcastAxis0(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax0(Var),
    Concat0(Vec<Var>),
    Slice0(Var, usize),
    Pad0(Var, usize),
    Reshape(Var),
    Conv2d(Var, Var),
    MaxPool2(Var, Arc<Vec<u32>>),
    Upsample2(Var),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::PowScalar(..) => "powf",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumAxis0(..) => "sum_axis0",
            Op::BroadcastAxis0(..) => "broadcast_axis0",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax0(..) => "softmax0",
            Op::Concat0(..) => "concat0",
            Op::Slice0(..) => "slice0",
            Op::Pad0(..) => "pad0",
            Op::Reshape(..) => "reshape",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2(..) => "maxpool2",
            Op::Upsample2(..) => "upsample2",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Scale(a, b)
            | Op::MatMul(a, b)
            | Op::Conv2d(a, b) => vec![*a, *b],
            Op::Concat0(parts) => parts.clone(),
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumAxis0(a)
            | Op::BroadcastAxis0(a)
            | Op::Transpose(a)
            | Op::Softmax0(a)
            | Op::Slice0(a, _)
            | Op::Pad0(a, _)
            | Op::Reshape(a)
            | Op::MaxPool2(a, _)
            | Op::Upsample2(a) => vec![*a],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Grid,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Gradients of a scalar with respect to a list of vars, in request order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub values: Vec<T>,
    /// Positions in the request list that the loss does not depend on; their
    /// entries in `values` are zero.
    pub unreachable: Vec<usize>,
}

impl<T> Gradients<T> {
    pub fn all_reachable(&self) -> bool {
        self.unreachable.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "var {v:?} used on a tape that did not create it");
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        self.check(v);
        &self.nodes[v.id]
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Grid, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.node(i).requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Grid, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, id }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Grid) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// A constant sharing `v`'s value but cut off from its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    /// Elementwise `a^p` for a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::PowScalar(a, p), |x| x.powf(p))
    }

    /// `a * s` where `s` holds a single value.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        Ok(self.push(value, Op::Scale(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^a)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Sum of all elements, as a `[1]` grid.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Grid::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Repeat a one-element var over `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::shape("expand", self.shape(a), shape));
        }
        let value = Grid::full(shape, self.value(a).item());
        Ok(self.push(value, Op::Expand(a)))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        self.push(value, Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, trailing: &[usize]) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::shape("broadcast_rows", self.shape(a), trailing));
        }
        let value = self.value(a).broadcast_rows(trailing);
        Ok(self.push(value, Op::BroadcastRows(a)))
    }

    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis0();
        self.push(value, Op::SumAxis0(a))
    }

    pub fn broadcast_axis0(&mut self, a: Var, lead: usize) -> Var {
        let value = self.value(a).broadcast_axis0(lead);
        self.push(value, Op::BroadcastAxis0(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn softmax0(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_axis0();
        self.push(value, Op::Softmax0(a))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let grids: Vec<&Grid> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Grid::concat0(&grids)?;
        Ok(self.push(value, Op::Concat0(parts.to_vec())))
    }

    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice0(start, len)?;
        Ok(self.push(value, Op::Slice0(a, start)))
    }

    /// Embed `a` at rows `start..` of a zero grid with `total` leading rows.
    pub fn pad0(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let src = self.value(a);
        let lead = src.shape()[0];
        if start + lead > total {
            return Err(Error::invalid(format!("pad0: {start}+{lead} > {total}")));
        }
        let inner = src.len() / lead;
        let mut data = vec![0.0; total * inner];
        data[start * inner..(start + lead) * inner].copy_from_slice(src.data());
        let mut shape = src.shape().to_vec();
        shape[0] = total;
        let value = Grid::from_parts(shape, data);
        Ok(self.push(value, Op::Pad0(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let value = grid::conv2d(self.value(x), self.value(k))?;
        Ok(self.push(value, Op::Conv2d(x, k)))
    }

    /// `x + b` with `b: [C]` broadcast over the spatial axes of `x: [C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let trailing = self.shape(x)[1..].to_vec();
        let bb = self.broadcast_rows(b, &trailing)?;
        self.add(x, bb)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (value, idx) = grid::maxpool2(self.value(x))?;
        Ok(self.push(value, Op::MaxPool2(x, Arc::new(idx))))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let value = grid::upsample2(self.value(x))?;
        Ok(self.push(value, Op::Upsample2(x)))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initializing raw parameters from a target value.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

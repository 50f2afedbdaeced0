//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an operation can only consume nodes that exist. Calling
//! [`Graph::backward`] walks the tape once in reverse and leaves the gradient
//! of every `requires_grad` leaf in that leaf's [`Tensor::grad`].

mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod spatial;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use norm::{BatchStats, BN_EPS, BN_MOMENTUM};
pub use spatial::conv_out_len;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for layers with batch-dependent behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    XLogX(Var),
    Reshape(Var),
    MulChannels { x: Var, s: Var },
    MatMul(Var, Var),
    Transpose(Var),
    RowNorm(Var),
    DivRows(Var, Var),
    LogSumExpRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    GatherSpatial { x: Var, batch: usize, coords: Vec<(usize, usize)> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    ChannelSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<u8> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// A single-writer computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Register an input tensor. Its `requires_grad` flag decides whether
    /// gradients are collected for it.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Register a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient accumulated on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Detect the NaN/Inf fault state on a node.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("node {} holds NaN or Inf", v.0)))
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.shape.iter().product::<usize>(), value.data.len());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse pass from a scalar loss. Leaf gradients add onto any gradient
    /// left by a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.nodes[i].value.grad;
                match slot {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = Accumulator { nodes: &self.nodes, grads };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(*a, |ga| add_into(ga, g));
                acc.add(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc.add(*a, |ga| add_into(ga, g));
                acc.add(*b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                acc.add(*a, |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc.add(*b, |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => acc.add(*x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc.add(*x, |gx| add_into(gx, g)),
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value.data;
                acc.add(*x, |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x.0].value.data;
                acc.add(*x, |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &node.value.data;
                acc.add(*x, |gx| {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(yv) {
                        *d += gi * yi;
                    }
                });
            }
            Op::XLogX(x) => elementwise::xlogx_backward(self, *x, g, &mut acc),
            Op::MulChannels { x, s } => elementwise::mul_channels_backward(self, *x, *s, g, &mut acc),
            Op::MatMul(a, b) => linalg::matmul_backward(self, *a, *b, g, &mut acc),
            Op::Transpose(x) => linalg::transpose_backward(self, *x, g, &mut acc),
            Op::RowNorm(x) => linalg::row_norm_backward(self, i, *x, g, &mut acc),
            Op::DivRows(x, s) => linalg::div_rows_backward(self, *x, *s, g, &mut acc),
            Op::LogSumExpRows(x) => linalg::logsumexp_rows_backward(self, i, *x, g, &mut acc),
            Op::SumAll(x) => acc.add(*x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc.add(*x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumAxis { x, axis } => reduce::axis_backward(self, *x, *axis, g, false, &mut acc),
            Op::MeanAxis { x, axis } => reduce::axis_backward(self, *x, *axis, g, true, &mut acc),
            Op::Conv2d { x, w, b, stride, pad } => {
                spatial::conv2d_backward(self, *x, *w, *b, *stride, *pad, g, &mut acc)
            }
            Op::Upsample2x(x) => spatial::upsample_backward(self, *x, g, &mut acc),
            Op::ConcatChannels(parts) => spatial::concat_backward(self, parts, g, &mut acc),
            Op::GatherSpatial { x, batch, coords } => {
                spatial::gather_backward(self, *x, *batch, coords, g, &mut acc)
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                norm::batchnorm_backward(self, *x, *gamma, *beta, xhat, inv_std, *train, g, &mut acc)
            }
            Op::ChannelSoftmax(x) => norm::softmax_backward(self, i, *x, g, &mut acc),
            Op::CrossEntropy { logits, targets } => {
                norm::cross_entropy_backward(self, *logits, targets, g, &mut acc)
            }
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffers, skipped for nodes that need no gradient.
pub(crate) struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    pub(crate) fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let n = node.value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

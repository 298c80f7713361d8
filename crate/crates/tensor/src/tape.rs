//! Reverse-mode differentiation tape.
//!
//! Every operation evaluates eagerly and appends one node holding its output
//! and whatever the backward rule needs. Nodes are only ever appended, so the
//! node order is a topological order of the forward graph and `backward` is a
//! single reverse sweep.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAxis(Var, usize),
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ops::conv::Conv2dSpec,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    MaxPoolSeq {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: ops::norm::BnSaved<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row statistics; the normalised input is recomputed from them.
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Records a forward computation for later differentiation.
///
/// A tape is confined to the thread that builds it.
pub struct Tape<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(leaf) into every gradient-tracking leaf.
    ///
    /// Gradients accumulate across repeated calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(shape.to_vec()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.backward_node(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, ops::elementwise::mul_values(g, vb)));
                }
                if self.wants(*b) {
                    out.push((*b, ops::elementwise::mul_values(g, va)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                out.push((*a, g.map(|v| v * c)));
            }
            Op::AddBias(a, b) => {
                out.push((*a, g.clone()));
                if self.wants(*b) {
                    out.push((*b, ops::elementwise::reduce_to_suffix(g, self.shape(*b))));
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.wants(*a),
                    self.wants(*b),
                );
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::Reshape(a) => {
                out.push((*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec())));
            }
            Op::Permute(a, perm) => {
                out.push((*a, ops::shape::permute_backward(g, perm)));
            }
            Op::Concat(inputs, axis) => {
                let sizes: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[*axis]).collect();
                let mut start = 0;
                for (v, size) in inputs.iter().zip(sizes) {
                    if self.wants(*v) {
                        out.push((*v, ops::shape::slice_values(g, *axis, start, size)));
                    }
                    start += size;
                }
            }
            Op::Slice { input, axis, start } => {
                out.push((
                    *input,
                    ops::shape::slice_backward(g, self.shape(*input), *axis, *start),
                ));
            }
            Op::SumAll(a) => {
                out.push((*a, Tensor::full(self.shape(*a).to_vec(), g.item())));
            }
            Op::MeanAxis(a, axis) => {
                out.push((*a, ops::reduce::mean_axis_backward(g, self.shape(*a), *axis)));
            }
            Op::Gelu(a) => out.push((*a, ops::activation::gelu_backward(self.value(*a), g))),
            Op::Relu(a) => out.push((*a, ops::activation::relu_backward(self.value(*a), g))),
            Op::Softmax(a, axis) => {
                out.push((*a, ops::activation::softmax_backward(&node.value, g, *axis)));
            }
            Op::Conv2d { x, w, bias, spec } => {
                let grads = ops::conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    spec,
                    self.wants(*x),
                    self.wants(*w),
                );
                out.extend(grads.dx.map(|t| (*x, t)));
                out.extend(grads.dw.map(|t| (*w, t)));
                if let Some(b) = bias {
                    if self.wants(*b) {
                        out.push((*b, ops::conv::bias_backward(g)));
                    }
                }
            }
            Op::MaxPool2d { x, argmax } | Op::MaxPoolSeq { x, argmax } => {
                out.push((*x, ops::pool::scatter_argmax(g, self.shape(*x), argmax)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let grads = ops::norm::batch_norm_backward(self.value(*gamma), g, saved);
                out.push((*x, grads.dx));
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let grads = ops::norm::layer_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    g,
                    mean,
                    inv_std,
                );
                out.push((*x, grads.dx));
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                out.push((
                    *logits,
                    ops::loss::cross_entropy_backward(self.shape(*logits), labels, probs, g.item()),
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert_eq!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(vec![2]));
        let x = tape.param(Tensor::ones(vec![2]));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }
}

//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value, its inputs and
//! whatever it needs for the backward pass. Inputs always precede their
//! consumers, so the append order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use personvlad::autodiff::Tape;
//! use personvlad::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod conv;
mod elementwise;
mod linalg;
mod normalize;
mod pool;
mod reduce;
mod shape;

#[cfg(any(test, feature = "fault-injection"))]
pub use conv::fault;
pub use elementwise::Elementwise;
pub use normalize::PROB_FLOOR;
pub use pool::pooled_extents;
pub use reduce::Reduce;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reduce {
        kind: Reduce,
        input: Var,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        tau: T,
    },
    L2Normalize {
        input: Var,
        eps: T,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: [usize; 3],
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<u32>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Expand(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Reduce { input, .. }
            | Op::Softmax { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::MaxPool3d { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Conv3d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) | Op::Unary(..) => "elementwise",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::Concat { .. } => "concat",
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "maxpool3d",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients are retained for it after backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A detached input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
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

    /// Operation name of each node, in append order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Input indices of node `v`; all of them are smaller than `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        if cfg!(debug_assertions)
            && value.data().iter().any(|v| v.is_nan())
            && inputs.iter().all(|i| self.nodes[i.0].value.all_finite())
        {
            panic!("{} produced NaN from finite inputs", op.name());
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from a single-element `loss` to every reachable
    /// node that requires them. Uses of one tensor along several paths
    /// accumulate by addition.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, delta) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs given its output
    /// gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                elementwise::binary_backward(*kind, self.value(*a), self.value(*b), g)
                    .into_iter()
                    .zip([*a, *b])
                    .map(|(t, v)| (v, t))
                    .collect()
            }
            Op::Unary(kind, a) => vec![(
                *a,
                elementwise::unary_backward(*kind, self.value(*a), out, g),
            )],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::MatMul(a, b) => {
                let (da, db) = linalg::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.wants(*a),
                    self.wants(*b),
                );
                [(*a, da), (*b, db)]
                    .into_iter()
                    .filter_map(|(v, t)| t.map(|t| (v, t)))
                    .collect()
            }
            Op::BatchMatMul(a, b) => {
                let (da, db) = linalg::bmm_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.wants(*a),
                    self.wants(*b),
                );
                [(*a, da), (*b, db)]
                    .into_iter()
                    .filter_map(|(v, t)| t.map(|t| (v, t)))
                    .collect()
            }
            Op::Transpose(a) => vec![(*a, linalg::transpose_last2(g))],
            Op::Reshape(a) => vec![(
                *a,
                Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec()),
            )],
            Op::Expand(a) => vec![(*a, shape::expand_backward(self.shape(*a), g))],
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(shape::concat_backward(&shapes, *axis, g))
                    .collect()
            }
            Op::Reduce {
                kind,
                input,
                axes,
                argmax,
            } => vec![(
                *input,
                reduce::backward(*kind, self.shape(*input), axes, argmax, g),
            )],
            Op::Softmax { input, tau } => {
                vec![(*input, normalize::softmax_backward(out, *tau, g))]
            }
            Op::L2Normalize { input, eps, norms } => vec![(
                *input,
                normalize::l2_backward(out, norms, *eps, g),
            )],
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => vec![(
                *logits,
                normalize::cross_entropy_backward(self.shape(*logits), targets, probs, g),
            )],
            Op::Conv3d {
                input,
                weight,
                bias,
                padding,
            } => {
                let grads = conv::backward(
                    self.value(*input),
                    self.value(*weight),
                    *padding,
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
                out
            }
            Op::MaxPool3d { input, argmax } => {
                vec![(*input, pool::backward(self.shape(*input), argmax, g))]
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf is unreachable from the loss or
    /// detached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_order_is_topological() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = tape.mul(a, b).unwrap();
        let d = tape.sigmoid(c);
        let e = tape.add(d, a).unwrap();
        let _ = tape.sum_all(e);
        for i in 0..tape.len() {
            for input in tape.inputs_of(Var(i)) {
                assert!(input.0 < i);
            }
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![0.5; 6]).unwrap());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn quadratic_gives_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -0.25, 4.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -0.5, 8.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = sum(x) + sum(3x) -> grad 4
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s1 = tape.sum_all(x);
        let x3 = tape.scale(x, 3.0);
        let s2 = tape.sum_all(x3);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detached_inputs_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }
}

//! Append-only computation tape with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every input id precedes its
//! consumer and the tape is acyclic by construction. [`Tape::backward`] walks
//! the nodes in exact reverse append order. Only nodes that (transitively)
//! depend on a `requires_grad` leaf receive gradients.

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, LayerNormCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    TransposeLast2(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Act(Var, Activation),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache<S>,
    },
    SoftmaxLast(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    MeanTokens(Var),
    Reshape(Var),
    Sum(Var),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::BatchedMatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::AddBias(x, b) => vec![*x, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::TransposeLast2(x)
            | Op::Scale(x, _)
            | Op::Act(x, _)
            | Op::SoftmaxLast(x)
            | Op::MeanTokens(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A dynamic computation graph recorded in append order.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Frozen leaves never receive a gradient.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Ids consumed by node `v`; each is strictly smaller than `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op_name: &str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::batched_matmul(self.value(a), self.value(b))?;
        self.push("batched_matmul", v, Op::BatchedMatMul(a, b))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose_last2(self.value(x))?;
        self.push("transpose", v, Op::TransposeLast2(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale(x, c))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let v = self.value(x).map(|e| act.apply(e));
        self.push("activation", v, Op::Act(x, act))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = kernels::add_bias(self.value(x), self.value(bias))?;
        self.push("add_bias", v, Op::AddBias(x, bias))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (v, cache) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_last(self.value(x));
        self.push("softmax", v, Op::SoftmaxLast(x))
    }

    /// Mean cross-entropy of `logits: [b, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let v = kernels::mean_tokens(self.value(x))?;
        self.push("mean_tokens", v, Op::MeanTokens(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    /// Populates gradients of the scalar `loss` for every node that depends on
    /// a trainable leaf. Fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), S::one()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            for (input, contrib) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(S::one(), &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.check_finite("backward").is_err() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, kernels::matmul_bt(g, val(*b))?));
                }
                if wants(*b) {
                    out.push((*b, kernels::matmul_at(val(*a), g)?));
                }
            }
            Op::BatchedMatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, kernels::batched_matmul_bt(g, val(*b))?));
                }
                if wants(*b) {
                    out.push((*b, kernels::batched_matmul_at(val(*a), g)?));
                }
            }
            Op::TransposeLast2(x) => out.push((*x, kernels::transpose_last2(g)?)),
            Op::Add(a, b) => {
                out.push((*a, kernels::reduce_to_shape(g, val(*a).shape())));
                out.push((*b, kernels::reduce_to_shape(g, val(*b).shape())));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = kernels::broadcast_binary("mul", g, bv, |x, y| x * y)?;
                    out.push((*a, kernels::reduce_to_shape(&ga, av.shape())));
                }
                if wants(*b) {
                    let gb = kernels::broadcast_binary("mul", g, av, |x, y| x * y)?;
                    out.push((*b, kernels::reduce_to_shape(&gb, bv.shape())));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|e| e * *c))),
            Op::Act(x, act) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| gi * act.derivative(xi))
                    .collect();
                out.push((*x, Tensor::from_parts_unchecked(xv.shape().to_vec(), data)));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if wants(*b) {
                    out.push((*b, kernels::sum_rows(g)));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(g, val(*gain), cache);
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            Op::SoftmaxLast(x) => {
                out.push((*x, kernels::softmax_last_backward(g, &node.value)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let upstream = g.data()[0];
                let c = probs.last_dim();
                let scale = upstream / S::from_usize_lossy(labels.len());
                let mut d = probs.data().to_vec();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * c + y] -= S::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, Tensor::from_parts_unchecked(probs.shape().to_vec(), d)));
            }
            Op::MeanTokens(x) => {
                out.push((*x, kernels::mean_tokens_backward(g, val(*x).shape())));
            }
            Op::Reshape(x) => out.push((*x, g.reshape(val(*x).shape().to_vec())?)),
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0])));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn frozen_leaf_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::full(vec![2, 2], 0.5), false);
        let x = tape.leaf(Tensor::full(vec![2, 2], 1.0), true);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) + sum(x), so grad = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum(sq).unwrap();
        let b = tape.sum(x).unwrap();
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 5.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn inputs_precede_consumers() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 2], 1.0), true);
        let w = tape.constant(Tensor::full(vec![2, 2], 1.0));
        let y = tape.matmul(x, w).unwrap();
        let z = tape.gelu(y).unwrap();
        let s = tape.sum(z).unwrap();
        for i in 0..tape.len() {
            let v = Var(i);
            assert!(tape.inputs(v).iter().all(|inp| inp.index() < i));
        }
        assert_eq!(tape.inputs(s), vec![z]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1], 1e300), true);
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite(_))));
    }
}

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward primitive records its inputs on the tape; [`Tape::backward`]
//! walks the tape in reverse and accumulates exact vector-Jacobian products.
//! The engine is generic over the scalar so the same graph runs in f32 for
//! training and in f64 for finite-difference checks.

mod attention;
mod conv;
mod elementwise;
mod norm;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Modulate {
        h: Var,
        ss: Var,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2x {
        x: Var,
    },
    MeanPool {
        x: Var,
    },
    Attention {
        qkv: Var,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
        weights: Option<Vec<T>>,
    },
    SumSquares {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every differentiable leaf of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require gradients. Leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes.get(v.0)?;
        match &self.grads[v.0] {
            Some(g) => Some(Tensor::from_vec(shape, g.clone()).expect("gradient shape")),
            None => None,
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameters, or inputs under a gradient check).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Computes gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::config(
                "loss",
                format!("backward needs a scalar, got shape {:?}", out.shape()),
            ));
        }
        if !out.data()[0].is_finite() {
            return Err(Error::non_finite("loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = GradSink {
                tape: self,
                grads: &mut grads,
            };
            self.backward_node(i, &g, &mut acc);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, i: usize, g: &[T], sink: &mut GradSink<'_, T>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => conv::conv2d_backward(self, *x, *w, *b, *stride, *pad, &node.value, g, sink),
            Op::Linear { x, w, b } => elementwise::linear_backward(self, *x, *w, *b, g, sink),
            Op::GroupNorm { x, rstd } => {
                norm::group_norm_backward(*x, rstd, &node.value, g, sink)
            }
            Op::Modulate { h, ss } => norm::modulate_backward(self, *h, *ss, g, sink),
            Op::Silu { x } => elementwise::silu_backward(self, *x, g, sink),
            Op::Add { a, b } => {
                sink.add(*a, g);
                sink.add(*b, g);
            }
            Op::Concat { a, b } => elementwise::concat_backward(self, *a, *b, g, sink),
            Op::Upsample2x { x } => elementwise::upsample_backward(self, *x, g, sink),
            Op::MeanPool { x } => elementwise::mean_pool_backward(self, *x, g, sink),
            Op::Attention { qkv, probs } => {
                attention::attention_backward(self, *qkv, probs, g, sink)
            }
            Op::Mse {
                pred,
                target,
                weights,
            } => elementwise::mse_backward(self, *pred, target, weights.as_deref(), g, sink),
            Op::SumSquares { x } => {
                let xv = self.value(*x).data();
                let g0 = g[0] + g[0];
                sink.with(*x, |dx| {
                    for (d, &v) in dx.iter_mut().zip(xv) {
                        *d += g0 * v;
                    }
                });
            }
        }
    }
}

/// Accumulates input gradients during the backward sweep.
pub(crate) struct GradSink<'a, T: Float> {
    tape: &'a Tape<T>,
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Float> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.tape.rg(v)
    }

    /// Runs `f` on the (zero-initialized on first use) gradient buffer of `v`.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let n = self.tape.value(v).numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    fn add(&mut self, v: Var, g: &[T]) {
        self.with(v, |d| {
            for (a, &b) in d.iter_mut().zip(g) {
                *a += b;
            }
        });
    }
}

impl<T: Float> Tape<T> {
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Silu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.ensure_shape(bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Sum of squares of all entries, as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::full(&[1], s), Op::SumSquares { x }, rg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_the_input() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let loss = tape.sum_squares(p);
        let g = tape.backward(loss).unwrap().get(p).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_and_constant_gets_none() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[3], 2.0));
        let unused = tape.leaf(Tensor::full(&[2], 5.0));
        let c = tape.constant(Tensor::full(&[3], 1.0));
        let s = tape.add(a, c).unwrap();
        let loss = tape.sum_squares(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[6.0; 3]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 2]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[3], 2.0));
        let s = tape.silu(a);
        assert!(matches!(tape.backward(s), Err(Error::Config { .. })));
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and, when any input
//! tracks gradients, the context its backward rule needs. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::nn::{concat, conv, linear, loss, norm, pool, upsample};
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<T> {
    Leaf,
    /// Output of an op none of whose inputs track gradients.
    Untracked,
    Elementwise { kind: Elementwise, a: Var, b: Var, broadcast: bool },
    Sum { x: Var },
    Scale { x: Var, k: T },
    Reshape { x: Var },
    Relu { x: Var },
    Conv2d(conv::Conv2dCtx),
    MaxPool(pool::MaxPoolCtx),
    Pad(pool::PadCtx),
    GlobalAvgPool { x: Var },
    Upsample { x: Var },
    BatchNorm(norm::BatchNormCtx<T>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { xs: Vec<Var> },
    CrossEntropy(loss::CrossEntropyCtx<T>),
    GatherSum { x: Var, picks: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    /// True when gradients flow through this node.
    pub(crate) tracked: bool,
}

pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tape's `requires_grad`
/// leaves.
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are returned for it by
    /// [`Tape::backward`] iff `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad;
        self.nodes.push(Node { op: Op::Leaf, value: tensor, tracked });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor.clone().with_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("var from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Backward(format!("variable {} is not on this tape", v.index)));
        }
        Ok(())
    }

    /// Appends an op output. `op` is only kept when some input is tracked.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.index].tracked);
        let op = if tracked { op } else { Op::Untracked };
        self.nodes.push(Node { op, value: value.with_grad(false), tracked });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb == Shape::new(1, sa.c(), 1, 1) {
            true
        } else {
            return Err(Error::ShapeMismatch { op: "elementwise", lhs: sa, rhs: sb });
        };
        let f = |x: T, y: T| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let plane = sa.plane();
        let out: Vec<T> = if broadcast {
            av.iter().enumerate().map(|(i, &x)| f(x, bv[(i / plane) % sa.c()])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::from_vec(sa, out)?;
        self.push("elementwise", value, &[a, b], Op::Elementwise { kind, a, b, broadcast })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.data().iter().map(|&e| e * k).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        self.push("scale", value, &[x], Op::Scale { x, k })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    /// `(n, c, h, w) → (n, c·h·w, 1, 1)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.reshape(x, [s.n(), s.item_len(), 1, 1])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect();
        let value = Tensor::from_vec(v.shape(), out)?;
        self.push("relu", value, &[x], Op::Relu { x })
    }

    /// Reverse sweep from a scalar `loss`. The seed gradient is 1 and
    /// gradients add across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::Backward(format!("loss must have shape (1, 1, 1, 1), got {ls}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::from_vec(node.value.shape(), g)?);
                continue;
            }
            for (v, gi) in self.backward_node(node, &g)? {
                if !self.nodes[v.index].tracked {
                    continue;
                }
                match &mut grads[v.index] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    /// Input gradients of one node given its output gradient.
    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let grads = match &node.op {
            Op::Leaf | Op::Untracked => Vec::new(),
            Op::Elementwise { kind, a, b, broadcast } => {
                let (a, b, broadcast) = (*a, *b, *broadcast);
                let shape = self.shape(a);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let plane = shape.plane();
                let bidx = |i: usize| if broadcast { (i / plane) % shape.c() } else { i };
                let mut res = Vec::new();
                if self.tracked(a) {
                    let ga = match kind {
                        Elementwise::Add | Elementwise::Sub => g.to_vec(),
                        Elementwise::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bv[bidx(i)]).collect(),
                    };
                    res.push((a, ga));
                }
                if self.tracked(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bidx(i)] += match kind {
                            Elementwise::Add => gi,
                            Elementwise::Sub => -gi,
                            Elementwise::Mul => gi * av[i],
                        };
                    }
                    res.push((b, gb));
                }
                res
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Scale { x, k } => vec![(*x, g.iter().map(|&e| e * *k).collect())],
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = g.iter().zip(xv).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect();
                vec![(*x, gx)]
            }
            Op::Conv2d(ctx) => conv::backward(self, ctx, g),
            Op::MaxPool(ctx) => pool::max_pool_backward(self, ctx, g),
            Op::Pad(ctx) => pool::pad_backward(self, ctx, g),
            Op::GlobalAvgPool { x } => pool::global_avg_pool_backward(self, *x, g),
            Op::Upsample { x } => upsample::backward(self, *x, node.value.shape(), g),
            Op::BatchNorm(ctx) => norm::backward(self, ctx, g),
            Op::Linear { x, w, b } => linear::backward(self, *x, *w, *b, g),
            Op::Concat { xs } => concat::backward(self, xs, g),
            Op::CrossEntropy(ctx) => loss::cross_entropy_backward(self, ctx, g),
            Op::GatherSum { x, picks } => loss::gather_sum_backward(self, *x, picks, g),
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t([1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(t([1, 1, 1, 2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let ones = tape.constant(t([1, 1, 1, 2], &[1.0, 1.0]));
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(a).data());
        let z = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_broadcast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]).with_grad(true));
        let b = tape.leaf(t([1, 2, 1, 1], &[10.0, 20.0]).with_grad(true));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
        let bad = tape.constant(t([1, 3, 1, 1], &[0.0; 3]));
        assert!(matches!(tape.add(x, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]).with_grad(true));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]).with_grad(true));
        let xx = tape.mul(x, x).unwrap();
        let l = tape.sum(xx).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], &[0.3; 4]).with_grad(true));
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn backward_rejects_bad_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]).with_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        let _ = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]).with_grad(true));
        let c = tape.constant(t([1, 1, 1, 2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 1, 1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]).with_grad(true));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}

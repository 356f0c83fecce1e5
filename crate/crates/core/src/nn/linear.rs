use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

/// Fully connected layer. `weight` is `(out_features, in_features, 1, 1)`,
/// `bias` is `(1, out_features, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn in_features(&self) -> usize {
        self.weight.shape().c()
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n()
    }
}

impl<T: Scalar> Tape<T> {
    /// `x · weightᵀ + bias`. Each batch item of `x` is read as a flat vector
    /// of `c·h·w` features; the output is `(n, out_features, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (out_f, in_f) = (ws.n(), ws.c());
        if ws.plane() != 1 || xs.item_len() != in_f {
            return Err(Error::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != Shape::new(1, out_f, 1, 1) {
                return Err(Error::ShapeMismatch { op: "linear bias", lhs: ws, rhs: self.shape(b) });
            }
        }
        let n = xs.n();
        let mut out = match b {
            Some(b) => self.value(b).data().repeat(n),
            None => vec![T::zero(); n * out_f],
        };
        gemm(false, true, n, in_f, out_f, self.value(x).data(), self.value(w).data(), true, &mut out);
        let value = Tensor::from_vec([n, out_f, 1, 1], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, &inputs, Op::Linear { x, w, b })
    }
}

pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    let (n, out_f, in_f) = (xs.n(), ws.n(), ws.c());
    let mut res = Vec::with_capacity(3);
    if tape.is_tracked(x) {
        let mut gx = vec![T::zero(); n * in_f];
        gemm(false, false, n, out_f, in_f, g, tape.value(w).data(), false, &mut gx);
        res.push((x, gx));
    }
    if tape.is_tracked(w) {
        let mut gw = vec![T::zero(); out_f * in_f];
        gemm(true, false, out_f, n, in_f, g, tape.value(x).data(), false, &mut gw);
        res.push((w, gw));
    }
    if let Some(b) = b.filter(|&b| tape.is_tracked(b)) {
        let mut gb = vec![T::zero(); out_f];
        for row in g.chunks(out_f) {
            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        res.push((b, gb));
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn identity_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s([2, 3, 1, 1], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let mut eye = Tensor::<f64>::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn small_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s([1, 2, 1, 1], &[1., 2.]).unwrap());
        let w = tape.constant(Tensor::from_f64s([1, 2, 1, 1], &[1., 1.]).unwrap());
        let b = tape.constant(Tensor::from_f64s([1, 1, 1, 1], &[0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);
    }

    #[test]
    fn accepts_unflattened_input_and_checks_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::create([2, 2, 2, 2], Fill::Ones).unwrap());
        let w = tape.constant(Tensor::create([3, 8, 1, 1], Fill::Ones).unwrap());
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0; 6]);
        let bad = tape.constant(Tensor::create([3, 7, 1, 1], Fill::Ones).unwrap());
        assert!(matches!(tape.linear(x, bad, None), Err(Error::ShapeMismatch { .. })));
    }
}

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

impl<T: Scalar> Tape<T> {
    /// Concatenates along the channel axis, preserving input order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat_channels", "no inputs"));
        };
        for &v in xs {
            self.check(v)?;
        }
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (s0.n(), s0.h(), s0.w()) {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: s0, rhs: s });
            }
            channels += s.c();
        }
        let out_shape = Shape::new(s0.n(), channels, s0.h(), s0.w());
        let mut out = Vec::with_capacity(out_shape.checked_numel()?);
        for i in 0..s0.n() {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape().item_len();
                out.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("concat_channels", value, xs, Op::Concat { xs: xs.to_vec() })
    }
}

pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, xs: &[Var], g: &[T]) -> Vec<(Var, Vec<T>)> {
    let n = tape.shape(xs[0]).n();
    let lens: Vec<usize> = xs.iter().map(|&v| tape.shape(v).item_len()).collect();
    let total: usize = lens.iter().sum();
    let mut offset = 0;
    let mut res = Vec::with_capacity(xs.len());
    for (&v, &len) in xs.iter().zip(&lens) {
        if tape.is_tracked(v) {
            let mut gx = Vec::with_capacity(n * len);
            for i in 0..n {
                gx.extend_from_slice(&g[i * total + offset..i * total + offset + len]);
            }
            res.push((v, gx));
        }
        offset += len;
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn single_input_is_identity() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::create([2, 3, 2, 2], Fill::Uniform { seed: 1, lo: 0.0, hi: 1.0 }).unwrap();
        let x = tape.constant(t.clone());
        let y = tape.concat_channels(&[x]).unwrap();
        assert_eq!(tape.value(y), &t);
    }

    #[test]
    fn layout_and_shape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::create([1, 2, 7, 7], Fill::Uniform { seed: 1, lo: 0.0, hi: 1.0 }).unwrap());
        let bt = Tensor::create([1, 3, 7, 7], Fill::Uniform { seed: 2, lo: 0.0, hi: 1.0 }).unwrap();
        let b = tape.constant(bt.clone());
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 7, 7));
        for j in 0..3 {
            for yy in 0..7 {
                for xx in 0..7 {
                    assert_eq!(tape.value(y).get(0, 2 + j, yy, xx), bt.get(0, j, yy, xx));
                }
            }
        }
    }

    #[test]
    fn mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 2, 7, 7]));
        let b = tape.constant(Tensor::zeros([1, 2, 6, 7]));
        let c = tape.constant(Tensor::zeros([2, 2, 7, 7]));
        assert!(tape.concat_channels(&[a, b]).is_err());
        assert!(tape.concat_channels(&[a, c]).is_err());
        assert!(tape.concat_channels(&[]).is_err());
    }
}

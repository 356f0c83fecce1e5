//! Bilinear resampling with the align-corners convention.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Per-output-coordinate source taps `(lo, hi, frac)` along one axis.
///
/// The source coordinate is `dst · (in − 1) / (out − 1)`, or `0` when
/// `out == 1`; the first and last samples land exactly on the input corners.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|d| {
            let src = if output > 1 { (d * (input - 1)) as f64 / (output - 1) as f64 } else { 0.0 };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Horizontal taps converted to the element type.
fn row_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    axis_taps(input, output).into_iter().map(|(lo, hi, f)| (lo, hi, T::from_f64(f))).collect()
}

impl<T: Scalar> Tape<T> {
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::invalid("bilinear_upsample", format!("cannot resample {s} to {out_h}x{out_w}")));
        }
        let out_shape = Shape::new(s.n(), s.c(), out_h, out_w);
        let ys = row_taps::<T>(s.h(), out_h);
        let xs = row_taps::<T>(s.w(), out_w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.checked_numel()?];
        // Separable: interpolate every input row to the output width, then
        // blend pairs of those rows.
        let mut wide = vec![T::zero(); s.h() * out_w];
        for (plane, dst) in xv.chunks(s.plane()).zip(out.chunks_mut(out_shape.plane())) {
            for (src, row) in plane.chunks(s.w()).zip(wide.chunks_mut(out_w)) {
                for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                    *o = src[x0] + (src[x1] - src[x0]) * fx;
                }
            }
            for (drow, &(y0, y1, fy)) in dst.chunks_mut(out_w).zip(&ys) {
                let (r0, r1) = (&wide[y0 * out_w..(y0 + 1) * out_w], &wide[y1 * out_w..(y1 + 1) * out_w]);
                for ((o, &a), &b) in drow.iter_mut().zip(r0).zip(r1) {
                    *o = a + (b - a) * fy;
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("bilinear_upsample", value, &[x], Op::Upsample { x })
    }
}

pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, x: Var, out_shape: Shape, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(x);
    let out_w = out_shape.w();
    let ys = row_taps::<T>(s.h(), out_shape.h());
    let xs = row_taps::<T>(s.w(), out_w);
    let mut gx = vec![T::zero(); s.numel()];
    let mut wide = vec![T::zero(); s.h() * out_w];
    for (gplane, gin) in g.chunks(out_shape.plane()).zip(gx.chunks_mut(s.plane())) {
        wide.fill(T::zero());
        for (grow, &(y0, y1, fy)) in gplane.chunks(out_w).zip(&ys) {
            let keep = T::one() - fy;
            for (o, &gv) in wide[y0 * out_w..(y0 + 1) * out_w].iter_mut().zip(grow) {
                *o += gv * keep;
            }
            for (o, &gv) in wide[y1 * out_w..(y1 + 1) * out_w].iter_mut().zip(grow) {
                *o += gv * fy;
            }
        }
        for (wrow, grow_in) in wide.chunks(out_w).zip(gin.chunks_mut(s.w())) {
            for (&gv, &(x0, x1, fx)) in wrow.iter().zip(&xs) {
                grow_in[x0] += gv * (T::one() - fx);
                grow_in[x1] += gv * fx;
            }
        }
    }
    vec![(x, gx)]
}

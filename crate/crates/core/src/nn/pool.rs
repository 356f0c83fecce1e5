//! Max pooling, zero padding and global average pooling.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

pub(crate) struct MaxPoolCtx {
    x: Var,
    /// Flat input index of the winning element for every output element.
    argmax: Vec<u32>,
}

pub(crate) struct PadCtx {
    x: Var,
    pad: (usize, usize),
}

/// Output extent of an unpadded, floor-mode pooling window.
pub fn pooled_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel >= 1 && stride >= 1 && kernel <= input).then(|| (input - kernel) / stride + 1)
}

/// Max pooling without padding. Returns the pooled values and, for every
/// output element, the flat index of its maximum in `input`; ties resolve to
/// the lowest flat index.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, kernel: (usize, usize), stride: (usize, usize)) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = input.shape();
    let (Some(oh), Some(ow)) = (pooled_extent(s.h(), kernel.0, stride.0), pooled_extent(s.w(), kernel.1, stride.1)) else {
        return Err(Error::invalid(
            "max_pool2d",
            format!("kernel {kernel:?} / stride {stride:?} invalid for input {s}"),
        ));
    };
    if s.numel() > u32::MAX as usize {
        return Err(Error::ShapeOverflow(s.0));
    }
    let out_shape = Shape::new(s.n(), s.c(), oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    // Separable: the maximum of each window row first, then the maximum of
    // those down the window. Strict comparisons in both passes keep the lowest
    // row, then the lowest column, i.e. the lowest flat index among ties.
    let mut row_max = vec![T::zero(); s.h() * ow];
    let mut row_arg = vec![0usize; s.h() * ow];
    for plane_idx in 0..s.n() * s.c() {
        let base = plane_idx * s.plane();
        let plane = &x[base..base + s.plane()];
        for (y, row) in plane.chunks(s.w()).enumerate() {
            for ox in 0..ow {
                let window = &row[ox * stride.1..ox * stride.1 + kernel.1];
                let m = window.iter().copied().fold(window[0], T::max);
                let best = window.iter().position(|&v| v == m).unwrap_or(0);
                row_max[y * ow + ox] = m;
                row_arg[y * ow + ox] = y * s.w() + ox * stride.1 + best;
            }
        }
        for oy in 0..oh {
            let y0 = oy * stride.0;
            for ox in 0..ow {
                let mut best = y0 * ow + ox;
                for y in y0 + 1..y0 + kernel.0 {
                    if row_max[y * ow + ox] > row_max[best] {
                        best = y * ow + ox;
                    }
                }
                out.push(row_max[best]);
                argmax.push((base + row_arg[best]) as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

impl<T: Scalar> Tape<T> {
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        self.check(x)?;
        let (value, argmax) = max_pool2d(self.value(x), kernel, stride)?;
        self.push("max_pool2d", value, &[x], Op::MaxPool(MaxPoolCtx { x, argmax }))
    }

    /// Zero padding of the two spatial dimensions.
    pub fn pad2d(&mut self, x: Var, pad: (usize, usize)) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        let (h, w) = (s.h() + 2 * pad.0, s.w() + 2 * pad.1);
        let out_shape = Shape::new(s.n(), s.c(), h, w);
        let mut out = vec![T::zero(); out_shape.checked_numel()?];
        let xv = self.value(x).data();
        for p in 0..s.n() * s.c() {
            for y in 0..s.h() {
                let src = &xv[p * s.plane() + y * s.w()..p * s.plane() + (y + 1) * s.w()];
                let start = p * h * w + (y + pad.0) * w + pad.1;
                out[start..start + s.w()].copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("pad2d", value, &[x], Op::Pad(PadCtx { x, pad }))
    }

    /// Spatial mean per channel: `(n, c, h, w) → (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::from_f64(s.plane() as f64);
        let out = self.value(x).data().chunks(s.plane()).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec([s.n(), s.c(), 1, 1], out)?;
        self.push("global_avg_pool", value, &[x], Op::GlobalAvgPool { x })
    }
}

pub(crate) fn max_pool_backward<T: Scalar>(tape: &Tape<T>, ctx: &MaxPoolCtx, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut gx = vec![T::zero(); tape.value(ctx.x).len()];
    for (&src, &gi) in ctx.argmax.iter().zip(g) {
        gx[src as usize] += gi;
    }
    vec![(ctx.x, gx)]
}

pub(crate) fn pad_backward<T: Scalar>(tape: &Tape<T>, ctx: &PadCtx, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(ctx.x);
    let (h, w) = (s.h() + 2 * ctx.pad.0, s.w() + 2 * ctx.pad.1);
    let mut gx = Vec::with_capacity(s.numel());
    for p in 0..s.n() * s.c() {
        for y in 0..s.h() {
            let start = p * h * w + (y + ctx.pad.0) * w + ctx.pad.1;
            gx.extend_from_slice(&g[start..start + s.w()]);
        }
    }
    vec![(ctx.x, gx)]
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(tape: &Tape<T>, x: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(x);
    let inv = T::one() / T::from_f64(s.plane() as f64);
    let gx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, s.plane())).collect();
    vec![(x, gx)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_size_geometry_gives_seven() {
        assert_eq!(pooled_extent(224, 56, 26), Some(7));
        assert_eq!(pooled_extent(64, 16, 8), Some(7));
        assert_eq!(pooled_extent(10, 11, 1), None);
    }

    #[test]
    fn four_by_four_two_by_two() {
        let x = Tensor::<f64>::from_f64s([1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let (y, arg) = max_pool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn full_window_is_global_max() {
        let x = Tensor::<f64>::from_f64s([1, 2, 2, 3], &[1., 9., 2., 3., 4., 5., -1., -2., -3., -4., -5., -6.]).unwrap();
        let (y, _) = max_pool2d(&x, (2, 3), (1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 1, 1));
        assert_eq!(y.data(), &[9.0, -1.0]);
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let x = Tensor::<f64>::from_f64s([1, 1, 2, 2], &[3.0, 3.0, 3.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.with_grad(true));
        let y = tape.max_pool2d(xv, (2, 2), (2, 2)).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_larger_than_input_fails() {
        let x = Tensor::<f64>::zeros([1, 1, 3, 3]);
        assert!(max_pool2d(&x, (4, 1), (1, 1)).is_err());
    }

    #[test]
    fn pad_and_global_average() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s([1, 1, 1, 2], &[1.0, 2.0]).unwrap().with_grad(true));
        let p = tape.pad2d(x, (1, 1)).unwrap();
        assert_eq!(tape.value(p).data(), &[0., 0., 0., 0., 0., 1., 2., 0., 0., 0., 0., 0.]);
        let c = tape.constant(Tensor::from_f64s([1, 2, 2, 2], &[4.0; 8]).unwrap());
        let m = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 4.0]);
        let gp = tape.global_avg_pool(p).unwrap();
        let l = tape.sum(gp).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0 / 12.0, 1.0 / 12.0]);
    }

    proptest! {
        #[test]
        fn gradient_is_one_hot_per_window(seed in 0u64..500, h in 2usize..9, w in 2usize..9, k in 1usize..3, s in 1usize..3) {
            let mut rng = crate::rng::SeedRng::new(seed);
            // distinct values guarantee unique maxima
            let perm = rng.permutation(2 * h * w);
            let x = Tensor::<f64>::from_f64s([1, 2, h, w], &perm.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
            let (y, arg) = max_pool2d(&x, (k, k), (s, s)).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_grad(true));
            let pooled = tape.max_pool2d(xv, (k, k), (s, s)).unwrap();
            // probe each output element separately
            for o in 0..y.len() {
                let mut sel = vec![0.0; y.len()];
                sel[o] = 1.0;
                let m = tape.constant(Tensor::from_vec(y.shape(), sel).unwrap());
                let prod = tape.mul(pooled, m).unwrap();
                let l = tape.sum(prod).unwrap();
                let g = tape.backward(l).unwrap();
                let gx = g.get(xv).unwrap().data();
                prop_assert_eq!(gx.iter().filter(|&&v| v != 0.0).count(), 1);
                prop_assert_eq!(gx[arg[o] as usize], 1.0);
            }
        }
    }
}

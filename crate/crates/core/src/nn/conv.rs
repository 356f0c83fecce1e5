//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

/// Convolution weights and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `(out_c, in_c, k_h, k_w)`
    pub weight: Tensor<T>,
    /// `(1, out_c, 1, 1)`
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: (usize, usize), pad: (usize, usize)) -> Result<Self> {
        let [out_c, wc, kh, kw] = weight.0;
        if input.c() != wc {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: input, rhs: weight });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (input.h() + 2 * pad.0, input.w() + 2 * pad.1);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            in_c: wc,
            h: input.h(),
            w: input.w(),
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride.0 + 1,
            ow: (pw - kw) / stride.1 + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Columns of the unfolded patch matrix (output pixels).
    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride-1, unpadded convolution reads the image directly as its
    /// patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }

    /// Unfolds one `(in_c, h, w)` image into `cols` (`k × p`, row-major).
    pub fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.in_c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            *o = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` back into `img`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.p();
        for ci in 0..self.in_c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct Conv2dCtx {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x` `(n, in_c, h, w)` with `w` `(out_c, in_c, k_h, k_w)`
    /// plus optional per-channel bias `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x);
        let geom = ConvGeom::new(xs, self.shape(w), stride, padding)?;
        if let Some(b) = b {
            self.check(b)?;
            let bs = self.shape(b);
            if bs != Shape::new(1, geom.out_c, 1, 1) {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: self.shape(w), rhs: bs });
            }
        }
        let n = xs.n();
        let (k, p) = (geom.k(), geom.p());
        let out_shape = Shape::new(n, geom.out_c, geom.oh, geom.ow);
        let mut out = vec![T::zero(); out_shape.checked_numel()?];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                let img = &xv[i * xs.item_len()..(i + 1) * xs.item_len()];
                let patches: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    geom.im2col(img, &mut cols);
                    &cols
                };
                let dst = &mut out[i * geom.out_c * p..(i + 1) * geom.out_c * p];
                if let Some(bv) = bv {
                    for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(bv[oc]);
                    }
                }
                gemm(false, false, geom.out_c, k, p, wv, patches, bv.is_some(), dst);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("conv2d", value, &inputs, Op::Conv2d(Conv2dCtx { x, w, b, geom }))
    }

    pub fn conv2d_with(&mut self, x: Var, w: Var, b: Option<Var>, p: &Conv2dParams<T>) -> Result<Var> {
        self.conv2d(x, w, b, p.stride, p.padding)
    }
}

pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, ctx: &Conv2dCtx, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let geom = ctx.geom;
    let xs = tape.shape(ctx.x);
    let n = xs.n();
    let (k, p, oc) = (geom.k(), geom.p(), geom.out_c);
    let xv = tape.value(ctx.x).data();
    let wv = tape.value(ctx.w).data();
    let want_x = tape.is_tracked(ctx.x);
    let want_w = tape.is_tracked(ctx.w);

    let mut gx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = if want_x && !geom.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };

    for i in 0..n {
        let gy = &g[i * oc * p..(i + 1) * oc * p];
        let img = &xv[i * xs.item_len()..(i + 1) * xs.item_len()];
        if want_w {
            let patches: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            // gw (oc × k) += gy (oc × p) · patchesᵀ (p × k)
            gemm(false, true, oc, p, k, gy, patches, true, &mut gw);
        }
        if want_x {
            let gimg = &mut gx[i * xs.item_len()..(i + 1) * xs.item_len()];
            if geom.is_pointwise() {
                gemm(true, false, k, oc, p, wv, gy, true, gimg);
            } else {
                gemm(true, false, k, oc, p, wv, gy, false, &mut gcols);
                geom.col2im(&gcols, gimg);
            }
        }
    }

    let mut res = Vec::with_capacity(3);
    if want_x {
        res.push((ctx.x, gx));
    }
    if want_w {
        res.push((ctx.w, gw));
    }
    if let Some(b) = ctx.b {
        if tape.is_tracked(b) {
            let mut gb = vec![T::zero(); oc];
            for i in 0..n {
                for (c, gbc) in gb.iter_mut().enumerate() {
                    let base = (i * oc + c) * p;
                    *gbc += g[base..base + p].iter().copied().sum::<T>();
                }
            }
            res.push((b, gb));
        }
    }
    res
}

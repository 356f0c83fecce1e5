//! Dense NCHW tensors.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Element type of a tensor. Training runs in `f32`; gradient checks run the
/// same code in `f64`.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a · b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary (nonnegative) row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the assertions above bound every index the kernel
                // touches, and `c` is borrowed mutably so it cannot alias.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Row-major `m×k` times `k×n` into a row-major `m×n` buffer, optionally
/// transposing either operand (given in its stored row-major layout).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    accumulate: bool,
    c: &mut [T],
) {
    let a_strides = if trans_a { (1, m) } else { (k, 1) };
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n, 1));
}

/// `(n, c, h, w)` extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Element count, or an error if it does not fit in `usize`.
    pub fn checked_numel(&self) -> Result<usize> {
        self.0
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::ShapeOverflow(self.0))
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { seed: u64, lo: f64, hi: f64 },
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { seed: u64, fan_in: usize },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: impl Into<Shape>, fill: Fill) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Ones => vec![T::one(); len],
            Fill::Constant(v) => vec![T::from_f64(v); len],
            Fill::Uniform { seed, lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::invalid("tensor_create", format!("uniform bounds {lo} > {hi}")));
                }
                let mut rng = SeedRng::new(seed);
                (0..len).map(|_| T::from_f64(rng.uniform(lo, hi))).collect()
            }
            Fill::Kaiming { seed, fan_in } => {
                if fan_in == 0 {
                    return Err(Error::invalid("tensor_create", "kaiming fan_in must be positive"));
                }
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = SeedRng::new(seed);
                (0..len).map(|_| T::from_f64(rng.normal(0.0, std))).collect()
            }
        };
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![T::zero(); shape.numel()], requires_grad: false }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        if data.len() != len {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn from_f64s(shape: impl Into<Shape>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: Shape::scalar(), data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel()? != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        Ok(Self { shape, ..self })
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// One batch item as a `(1, c, h, w)` tensor.
    pub fn item_tensor(&self, n: usize) -> Tensor<T> {
        let len = self.shape.item_len();
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_fills() {
        let z = Tensor::<f32>::create([1, 1, 2, 2], Fill::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f32>::create([1, 1, 1, 1], Fill::Constant(3.5)).unwrap();
        assert_eq!(c.data(), &[3.5]);
        let o = Tensor::<f64>::create([2, 1, 1, 1], Fill::Ones).unwrap();
        assert_eq!(o.data(), &[1.0, 1.0]);
    }

    #[test]
    fn uniform_is_deterministic() {
        let fill = Fill::Uniform { seed: 7, lo: 0.0, hi: 1.0 };
        let a = Tensor::<f32>::create([1, 1, 2, 2], fill).unwrap();
        let b = Tensor::<f32>::create([1, 1, 2, 2], fill).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn kaiming_scale() {
        let t = Tensor::<f64>::create([64, 32, 3, 3], Fill::Kaiming { seed: 1, fan_in: 32 * 9 }).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Tensor::<f32>::create([usize::MAX, 2, 1, 1], Fill::Zeros),
            Err(Error::ShapeOverflow(_))
        ));
        assert!(Tensor::<f32>::create([1, 1, 1, 1], Fill::Uniform { seed: 0, lo: 1.0, hi: 0.0 }).is_err());
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn empty_shapes_are_valid() {
        let t = Tensor::<f32>::create([0, 3, 4, 4], Fill::Ones).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 3, 2, &a, &b, false, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ·a is 3x3 with a stored as 2x3
        let mut g = [0.0f64; 9];
        gemm(true, false, 3, 2, 3, &a, &a, false, &mut g);
        assert_eq!(g, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        // a·aᵀ accumulated onto ones
        let mut h = [1.0f64; 4];
        gemm(false, true, 2, 3, 2, &a, &a, true, &mut h);
        assert_eq!(h, [15.0, 33.0, 33.0, 78.0]);
    }

    proptest! {
        #[test]
        fn flat_index_round_trip(n in 1usize..4, c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let shape = Shape::new(n, c, h, w);
            let mut t = Tensor::<f64>::zeros(shape);
            let mut rng = SeedRng::new(seed);
            let (i, j, k, l) = (rng.below(n), rng.below(c), rng.below(h), rng.below(w));
            t.set(i, j, k, l, 42.0);
            let flat = i * (c * h * w) + j * (h * w) + k * w + l;
            prop_assert_eq!(t.data()[flat], 42.0);
            prop_assert_eq!(t.get(i, j, k, l), 42.0);
            prop_assert_eq!(t.sum(), 42.0);
        }
    }
}

//! Dense 4-D tensors, the reverse-mode differentiation tape and the
//! finite-difference gradient checker.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, standard_suite, GradCheckReport};
pub use ops::{resize_bilinear, LossKind};
pub use tape::{BackwardCtx, Tape, Var};

use std::sync::Arc;

/// Element type of every tensor: `f32` for training, `f64` for verification.
pub trait Scalar:
    rustfft::FftNum
    + num_traits::Float
    + std::ops::AddAssign
    + Default
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (named to avoid clashing with
    /// `num_traits::FromPrimitive`).
    fn of(v: f64) -> Self;
    fn lift(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn lift(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn lift(self) -> f64 {
        self
    }
}

/// Extents of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(
            b >= 1 && c >= 1 && h >= 1 && w >= 1,
            "all extents must be >= 1, got ({b},{c},{h},{w})"
        );
        Shape { b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Flat index of element (b, c, y, x).
    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.b && c < self.c && y < self.h && x < self.w);
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    /// Number of elements in one (b, c) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

/// Dense 4-D array with cheap clones (shared storage, copy-on-write).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); shape.numel()]),
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![v; shape.numel()]),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "element count {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Tensor filled by `f(b, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.idx(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.idx(b, c, y, x);
        self.data_mut()[i] = v;
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn scalar(&self) -> T {
        assert_eq!(self.shape.numel(), 1, "scalar() on shape {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| U::of(v.lift())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.lift() - b.lift()).abs())
            .fold(0.0, f64::max)
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
        }
    }
}

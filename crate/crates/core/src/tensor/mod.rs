//! Dense row-major tensors and the raw kernels the autodiff layer is built on.
//!
//! Everything here is eager and untracked. [`crate::autograd::Var`] wraps these
//! kernels and records their adjoints on a tape.

mod kernels;
mod matmul;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_like::FloatOps;

pub use kernels::{broadcast_shape, reduce_sum, sum_to_shape};
pub(crate) use kernels::binary as kernels_binary;
pub use matmul::{gemm, gemm_naive, transpose2d};

/// Size of the worker pool used by matrix products.
pub fn worker_threads() -> usize {
    rayon::current_num_threads()
}

/// Fixes the global worker pool size. Only the first call in a process can succeed.
pub fn set_worker_threads(threads: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| crate::Error::InvalidArgument(format!("cannot size the worker pool: {e}")))
}

use crate::error::{Error, Result};

/// Element precision selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

mod num_like {
    /// The handful of transcendental functions the kernels need.
    pub trait FloatOps: Copy {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn erf(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
    }

    impl FloatOps for f32 {
        fn exp(self) -> Self {
            f32::exp(self)
        }
        fn ln(self) -> Self {
            f32::ln(self)
        }
        fn sqrt(self) -> Self {
            f32::sqrt(self)
        }
        fn erf(self) -> Self {
            libm::erff(self)
        }
        fn abs(self) -> Self {
            f32::abs(self)
        }
        fn is_finite(self) -> bool {
            f32::is_finite(self)
        }
    }

    impl FloatOps for f64 {
        fn exp(self) -> Self {
            f64::exp(self)
        }
        fn ln(self) -> Self {
            f64::ln(self)
        }
        fn sqrt(self) -> Self {
            f64::sqrt(self)
        }
        fn erf(self) -> Self {
            libm::erf(self)
        }
        fn abs(self) -> Self {
            f64::abs(self)
        }
        fn is_finite(self) -> bool {
            f64::is_finite(self)
        }
    }
}

/// Real element type: `f32` for training and inference, `f64` for gradient checking.
pub trait Scalar:
    FloatOps
    + Copy
    + Default
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides: `stride[j]` is the product of all extents after `j`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for j in (0..shape.len().saturating_sub(1)).rev() {
        out[j] = out[j + 1] * shape[j + 1];
    }
    out
}

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        if n != data.len() {
            return Err(Error::ElementCount {
                from: vec![data.len()],
                from_numel: data.len(),
                to: shape,
                to_numel: n,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    /// Builds a tensor by evaluating `f` at every flat offset.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(f).collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::ONE } else { T::ZERO })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data, new shape. Never copies element order.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_reshape(&self.shape, &shape)?;
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn into_reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_reshape(&self.shape, &shape)?;
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Materialized axis permutation: `out[idx[axes[0]], .., idx[axes[r-1]]] = self[idx]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.rank())?;
        let (shape, data) = kernels::permute(&self.shape, &self.data, axes);
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Converts element precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Max elementwise `|a-b| / max(|a|, |b|, floor)`.
    pub fn max_rel_diff(&self, other: &Self, floor: f64) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let (a, b) = (a.to_f64(), b.to_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(floor)
            })
            .fold(0.0, f64::max)
    }

    /// Bit-level equality of shape and data (NaN-aware via `to_f64().to_bits()`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    /// 2-D matrix product via the blocked kernel; `self` may carry leading batch axes.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::ZERO; m * n];
        gemm(m, k, n, &self.data, &rhs.data, &mut out);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Tensor::new(shape, out)
    }
}

pub(crate) fn check_reshape(from: &[usize], to: &[usize]) -> Result<()> {
    let (a, b) = (numel(from), numel(to));
    if a != b {
        return Err(Error::ElementCount {
            from: from.to_vec(),
            from_numel: a,
            to: to.to_vec(),
            to_numel: b,
        });
    }
    Ok(())
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    let ok = axes.len() == rank
        && axes.iter().all(|&a| {
            if a < rank && !seen[a] {
                seen[a] = true;
                true
            } else {
                false
            }
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidPermutation {
            axes: axes.to_vec(),
            rank,
        })
    }
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(m, k, n)` for `a [.., m, k] x b [k, n]`, where `m` folds all leading axes of `a`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.is_empty() || b.len() != 2 || a[a.len() - 1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let k = b[0];
    let m = if k == 0 { numel(&a[..a.len() - 1]) } else { numel(a) / k };
    Ok((m, k, b[1]))
}

/// Validates a reduction axis list (in range, distinct) and returns it sorted.
pub(crate) fn check_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    let dup = sorted.windows(2).any(|w| w[0] == w[1]);
    if dup || sorted.iter().any(|&a| a >= rank) {
        return Err(Error::InvalidAxes {
            axes: axes.to_vec(),
            rank,
        });
    }
    Ok(sorted)
}

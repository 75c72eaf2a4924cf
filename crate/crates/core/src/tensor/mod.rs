//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is an immutable value (shape plus shared storage). Gradient
//! tracking lives in [`Var`], which pairs a value with an optional node on a
//! [`Tape`]. Operations between untracked vars never touch a tape, so
//! inference passes pay nothing for autodiff.
//!
//! Storage is generic over [`Float`] so the same kernels run in `f32` (the
//! production precision) and `f64` (used by finite-difference oracles).
//! Reductions always accumulate in `f64` and round once at the end.

mod kernels;
pub mod rtd;
mod sparse;
mod tape;
mod var;

use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

pub use sparse::SparseMap;
pub use tape::{Gradients, Tape};
pub use var::Var;

use crate::error::{Error, Result};

/// Scalar element type: implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_wide(v: f64) -> Self;
    fn to_wide(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn from_wide(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn from_wide(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self
    }
}

const CHECK_UNSET: u8 = 0;
const CHECK_OFF: u8 = 1;
const CHECK_ON: u8 = 2;

static FINITE_CHECKS: AtomicU8 = AtomicU8::new(CHECK_UNSET);

/// Environment variable that forces finite checks on (`1`) or off (`0`).
pub const NANCHECK_ENV: &str = "ANYI2V_DEBUG_NANCHECK";

/// Whether every op verifies its output is finite.
///
/// Defaults to on in debug builds and off in release builds; the
/// `ANYI2V_DEBUG_NANCHECK` environment variable overrides the default.
pub fn finite_checks_enabled() -> bool {
    match FINITE_CHECKS.load(Ordering::Relaxed) {
        CHECK_ON => true,
        CHECK_OFF => false,
        _ => {
            let on = match std::env::var(NANCHECK_ENV) {
                Ok(v) => v.trim() == "1",
                Err(_) => cfg!(debug_assertions),
            };
            FINITE_CHECKS.store(if on { CHECK_ON } else { CHECK_OFF }, Ordering::Relaxed);
            on
        }
    }
}

pub fn set_finite_checks(on: bool) {
    FINITE_CHECKS.store(if on { CHECK_ON } else { CHECK_OFF }, Ordering::Relaxed);
}

pub(crate) fn check_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    if finite_checks_enabled() && data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// Dense N-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be a non-empty list of positive integers".into(),
        });
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {} elements", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output shape is known-good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_wide(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = numel_of(&shape);
        Ok(Self::from_parts(shape, vec![value; n]))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![T::zero(); self.numel()])
    }

    pub fn ones_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![T::one(); self.numel()])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Ok(Self::from_parts(shape, data))
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_wide()).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() requires exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return None;
        }
        let flat: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        Some(self.data[flat])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel_of(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_wide(v.to_wide())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_wide()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let w = v.to_wide();
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_wide() - b.to_wide()).abs())
            .fold(0.0, f64::max))
    }

    /// `‖self − reference‖₂ / ‖reference‖₂`.
    pub fn rel_l2(&self, reference: &Self) -> Result<f64> {
        self.same_shape(reference, "rel_l2")?;
        let num: f64 = self
            .data
            .iter()
            .zip(reference.data.iter())
            .map(|(a, b)| {
                let d = a.to_wide() - b.to_wide();
                d * d
            })
            .sum();
        let den = reference.l2_norm();
        Ok(if den == 0.0 {
            num.sqrt()
        } else {
            num.sqrt() / den
        })
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    // Non-differentiable conveniences built on the same kernels the tape uses.

    pub fn add(&self, other: &Self) -> Result<Self> {
        kernels::binary(kernels::BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        kernels::binary(kernels::BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        kernels::binary(kernels::BinaryOp::Mul, self, other)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        kernels::binary(kernels::BinaryOp::Div, self, other)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| T::from_wide(v.to_wide() * factor))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        kernels::matmul(self, other)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        kernels::permute(self, axes)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        kernels::narrow(self, axis, start, len)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        kernels::concat(parts, axis)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        kernels::softmax(self, axis)
    }
}

//! Scalar abstraction for the numeric core.
//!
//! Everything under `tensor`, `dist`, `objective`, and `model` is generic over
//! [`Scalar`] so the same kernels serve f32 and f64. The training stack pins
//! the crate-root alias `Real = f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::float::FloatConst;
use num_traits::{Float, NumAssignOps};

/// Floating-point element type accepted by tensors and distributions.
pub trait Scalar:
    Float + FloatConst + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Shorthand for `from_f64` used heavily in kernel code.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

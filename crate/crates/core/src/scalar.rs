//! Floating-point scalar abstraction shared by the quantizer and the
//! inference kernels.
//!
//! Everything that touches disk is `f32`. The arithmetic in between is
//! generic so the same code can be run in `f64` when exact-arithmetic
//! behaviour is wanted (hand-checked examples, oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Rounds to the nearest integer, ties to even.
    fn round_half_even(self) -> Self;

    /// Lossless widening for reporting.
    fn to_f64_lossless(self) -> f64;

    /// Narrowing (or identity) conversion from an `f32` stored on disk.
    fn from_storage(v: f32) -> Self;

    /// Conversion into the on-disk representation.
    fn to_f32_storage(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_storage(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_storage(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    #[inline]
    fn from_storage(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_storage(self) -> f32 {
        self as f32
    }
}

/// Converts a small integer constant into `T`.
#[inline]
pub(crate) fn cst<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in every Scalar")
}

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Real scalar the numeric modules are written against.
///
/// Implemented for `f32` and `f64`. Conversions through `f64` are used for
/// constants and for the on-disk formats, which always store 64-bit values.
pub trait Scalar:
    Float
    + FloatConst
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_real(v: f64) -> Self;

    fn to_real(self) -> f64;

    fn from_count(v: usize) -> Self {
        Self::from_real(v as f64)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_real(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_real(self) -> f64 {
        self as f64
    }
}

/// Shorthand for `T::from_real(v)` in generic code.
#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::from_real(v)
}

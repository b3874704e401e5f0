//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the restoration engine is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<S: Real>(v: f64) -> S {
    S::from_f64(v).expect("f64 literal representable in scalar type")
}

/// Converts a scalar back to `f64` for reporting.
#[inline]
pub fn to_f64<S: Real>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Converts an index or count into the working scalar.
#[inline]
pub fn from_usize<S: Real>(v: usize) -> S {
    S::from_usize(v).expect("usize representable in scalar type")
}

//! Scalar abstraction shared by the channel, modem and network code.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is
//! implemented for `f32` (training) and `f64` (evaluation and oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point type usable throughout the crate.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    /// Converts an `f64` literal or value into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    /// Converts an index or count into this type.
    #[inline]
    fn count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts a complex number between scalar types.
#[inline]
pub fn cast_complex<A: Scalar, B: Scalar>(z: Complex<A>) -> Complex<B> {
    Complex::new(B::lit(z.re.as_f64()), B::lit(z.im.as_f64()))
}

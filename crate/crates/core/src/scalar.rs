use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps, NumCast, Zero};

/// Element type for tensors and model parameters.
///
/// The associated `Accum` type is the wider type every reduction
/// (convolution taps, dot products, losses) accumulates in before rounding
/// once on store. For the default `f32` storage this is `f64`, which keeps
/// results independent of summation-order micro-optimizations and makes
/// runs bit-reproducible across builds.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Copy + Send + Sync + Debug + Display + 'static
{
    type Accum: Float + NumAssignOps + Copy + Send + Sync + Debug + 'static;

    fn accum(self) -> Self::Accum;
    fn from_accum(a: Self::Accum) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn accum_zero() -> Self::Accum {
        Self::Accum::zero()
    }

    fn accum_from_f64(v: f64) -> Self::Accum {
        <Self::Accum as NumCast>::from(v).expect("finite f64 converts to accumulator")
    }
}

impl Scalar for f32 {
    type Accum = f64;

    #[inline(always)]
    fn accum(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_accum(a: f64) -> f32 {
        a as f32
    }
}

impl Scalar for f64 {
    type Accum = f64;

    #[inline(always)]
    fn accum(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_accum(a: f64) -> f64 {
        a
    }
}

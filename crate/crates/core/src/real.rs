//! Scalar abstraction so the same engine runs in `f32` (training, checkpoints)
//! and `f64` (gradient checking, cache-equivalence checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn erf(self) -> Self;

    fn to_f32_bits(self) -> f32;

    fn from_f32_bits(x: f32) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    #[inline]
    fn to_f32_bits(self) -> f32 {
        self
    }

    #[inline]
    fn from_f32_bits(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline]
    fn to_f32_bits(self) -> f32 {
        self as f32
    }

    #[inline]
    fn from_f32_bits(x: f32) -> Self {
        x as f64
    }
}

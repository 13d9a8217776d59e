//! Scalar abstraction shared by every numeric kernel in this crate.
//!
//! All math is written against [`Real`] so the same code runs in `f32` or
//! `f64`. The reference tolerances and the harness assume `f64`; `f32` is
//! available where memory or throughput matters more than precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::distributions::uniform::SampleUniform;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar accepted by the kernels.
pub trait Real:
    Float
    + FromPrimitive
    + SampleUniform
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into `Self` (rounds for `f32`).
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant")
    }

    /// `1/2` without going through a conversion at every call site.
    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    /// `2` as a scalar.
    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_round_trips_f64() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f64::half(), 0.5);
        assert_eq!(f64::two(), 2.0);
    }

    #[test]
    fn lit_rounds_for_f32() {
        assert_eq!(f32::lit(0.1), 0.1f32);
    }
}

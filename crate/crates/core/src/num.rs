//! Scalar abstraction shared by the deterministic and stochastic layers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is generic over (`f32` or `f64`).
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Smallest tolerance that is still meaningful for this precision.
    fn min_tolerance() -> Self {
        Self::epsilon() * lit(100.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into the working scalar.
#[inline(always)]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite literal")
}

/// Converts a working scalar into `f64` for reporting.
#[inline(always)]
pub fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the estimator can run on: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Tolerance used when checking rotation orthonormality.
    fn orthonormal_tolerance() -> Self;
}

impl Real for f32 {
    fn orthonormal_tolerance() -> Self {
        2e-5
    }
}

impl Real for f64 {
    fn orthonormal_tolerance() -> Self {
        1e-9
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

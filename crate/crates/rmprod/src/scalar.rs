//! Floating point abstraction shared by the generic numerical kernels.

use std::fmt::{Debug, Display};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, NumCast};

/// Real scalar accepted by the generic kernels (quadrature, symmetric
/// functions, estimators). Implemented for `f32` and `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + NumCast + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits the scalar type")
    }

    /// Conversion from a count or index.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits the scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        NumCast::from(self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Principal logarithm that returns `None` at the origin instead of `-inf`.
pub fn checked_ln<T: Real>(z: Complex<T>) -> Option<Complex<T>> {
    if z.norm_sqr() == T::zero() {
        None
    } else {
        Some(z.ln())
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_diff<T: Real>(a: Complex<T>, b: Complex<T>, floor: T) -> T {
    let scale = a.norm().max(b.norm()).max(floor);
    (a - b).norm() / scale
}

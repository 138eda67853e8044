//! Floating-point abstraction shared by every simulator module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the simulator is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
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
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Round to nearest integer, ties to even.
    fn round_half_even(self) -> Self {
        let r = self.round();
        let diff = (self - self.trunc()).abs();
        if diff == Self::of(0.5) {
            let half = r / Self::of(2.0);
            if half.trunc() != half {
                // `round` went away from zero onto an odd value
                return r - self.signum();
            }
        }
        r
    }

    /// Midpoint of `a` and `b` that never overflows.
    #[inline]
    fn midpoint(a: Self, b: Self) -> Self {
        a + (b - a) / Self::of(2.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point element type of the network engine: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, which always succeeds for float types.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("float conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

//! Floating-point element type used throughout the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by every numeric routine in the crate.
///
/// Implemented for `f32` and `f64`. Computation defaults to `f64`; `f32`
/// is the on-disk precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
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
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

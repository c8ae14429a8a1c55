//! Scalar abstraction: one trait bound covering everything the tape needs.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable as the element type of tensors and tapes.
///
/// Implemented for `f32` and `f64`. The bound pulls in `num_traits::Float`
/// for the elementary functions plus conversions to/from `f64`, which the
/// checkpoint format and gradient checker rely on.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion to `f64` (exact for both supported types' range).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Lift an `f64` literal into the scalar type `F`.
pub fn fl<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("literal representable in scalar type")
}

//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the model, oracles, and metrics are generic over.
///
/// `f32` and `f64` both qualify. Random initialization draws in `f64` and
/// converts, so the `f32` model is the rounded `f64` model.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ScalarOperand + Sum + Send + Sync + Debug + Display + 'static
{
    /// Shorthand for converting an `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion back to `f64` (exact for both f32 and f64).
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

//! Scalar abstraction shared by the tensor substrate and the model stack.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

/// Real scalar type a [`crate::Tensor`] can hold: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for the floating types implemented here.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Widens to `f64`; lossless for `f32` and `f64`.
    #[inline]
    fn widen(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }

    /// Largest `x` with `exp(-x)` still a positive normal number.
    fn max_exp_arg() -> Self;
}

impl Scalar for f32 {
    fn max_exp_arg() -> Self {
        87.0
    }
}

impl Scalar for f64 {
    fn max_exp_arg() -> Self {
        708.0
    }
}

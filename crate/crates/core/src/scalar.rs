use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point type the battery and energy math is written against.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Converts a literal constant. Panics only if the type cannot hold an `f64` constant at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar type cannot represent constant")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

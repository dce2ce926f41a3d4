//! Scalar abstraction: everything numeric in this crate is generic over a
//! floating-point type implementing [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable as tensor element type.
///
/// `f64` is the default throughout (gradient checks need the headroom);
/// `f32` is available as an opt-in training precision.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    fn real(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to scalar type")
    }

    /// Widening conversion used by serializers and metrics.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

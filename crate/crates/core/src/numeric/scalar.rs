use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Arithmetic precision grade.
///
/// Train-grade (f32) is used for dataset generation and training runs;
/// check-grade (f64) is mandatory for gradient checks and for the
/// verification/analysis tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Train,
    Check,
}

/// Scalar element type of [`Matrix`](crate::numeric::Matrix) and the tape.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + std::str::FromStr
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    /// Byte width tag used by the checkpoint format.
    const DTYPE_TAG: u8;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Train;
    const DTYPE_TAG: u8 = 4;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Check;
    const DTYPE_TAG: u8 = 8;
}

/// Shorthand for embedding an f64 constant into the active scalar type.
pub fn real<F: Scalar>(v: f64) -> F {
    F::from(v).expect("f64 conversion")
}

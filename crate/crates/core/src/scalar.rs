//! Scalar abstraction shared by the model, loss and training code.
//!
//! Everything numeric is written against [`Scalar`], so the same loss and
//! aggregation code runs in `f32`, `f64` and quad precision (`f128`). The
//! quad instantiation is what the finite-difference gradient checker uses to
//! keep rounding noise far below the tolerance it asserts.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use f128::f128;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Send + Sync + 'static
{
    /// Significant digits written to text checkpoints; enough to round-trip.
    const SIGNIFICANT_DIGITS: usize;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Scientific notation with [`Scalar::SIGNIFICANT_DIGITS`] digits.
    fn format_sig(self) -> String;

    fn parse_scalar(s: &str) -> Option<Self>;
}

impl Scalar for f32 {
    const SIGNIFICANT_DIGITS: usize = 9;

    fn format_sig(self) -> String {
        format!("{:.*e}", Self::SIGNIFICANT_DIGITS - 1, self)
    }

    fn parse_scalar(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Scalar for f64 {
    const SIGNIFICANT_DIGITS: usize = 17;

    fn format_sig(self) -> String {
        format!("{:.*e}", Self::SIGNIFICANT_DIGITS - 1, self)
    }

    fn parse_scalar(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

// Quad values are checkpointed through f64; they are only used for
// verification, never persisted in practice.
impl Scalar for f128 {
    const SIGNIFICANT_DIGITS: usize = 17;

    fn format_sig(self) -> String {
        self.as_f64().format_sig()
    }

    fn parse_scalar(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().map(Self::of)
    }
}

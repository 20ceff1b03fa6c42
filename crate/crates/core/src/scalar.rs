//! Numeric abstraction for priorities, rates and timeouts.
//!
//! Arbitration only needs ordered field arithmetic, so it is written against
//! [`Scalar`] and runs unchanged on `f32`, `f64` or exact rationals.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Ordered field usable for arbitration arithmetic.
pub trait Scalar:
    Num + PartialOrd + Copy + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Converts a configuration value. Panics if the value is not finite.
    fn from_config(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(|| panic!("{value} is not representable"))
    }

    /// Converts a millisecond span into seconds.
    fn from_millis(ms: u64) -> Self {
        let ms = Self::from_u64(ms).expect("millisecond count is representable");
        ms / Self::from_u64(1000).expect("1000 is representable")
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn is_unit_interval(self) -> bool {
        self >= Self::zero() && self <= Self::one()
    }
}

impl<T> Scalar for T where
    T: Num + PartialOrd + Copy + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
}

//! Scalar abstraction for the numerical kernels.
//!
//! The moment, projection, cone-QP and game-solver code is written once over
//! [`Scalar`] and instantiated for `f32` and `f64`. Statistical layers
//! (distribution functions, Monte Carlo, simulation) work in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// A tolerance no tighter than what the type can resolve.
    ///
    /// Requests below `64 * epsilon` are widened so that `f32` callers do not
    /// chase residuals that single precision cannot represent.
    #[inline]
    fn tol(requested: f64) -> Self {
        let floor = Self::epsilon() * Self::lit(64.0);
        Self::lit(requested).max(floor)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

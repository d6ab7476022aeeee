//! Scalar abstraction shared by the numeric kernels.
//!
//! Kernels are written once over [`Scalar`] and instantiated for `f32`
//! (the storage and file dtype) and `f64` (reference runs and oracles).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// Finite stand-in for `-inf` added to disallowed attention logits.
    fn mask_sentinel() -> Self {
        Self::from_f64(-1e9).unwrap()
    }

    /// Epsilon added to cosine-similarity denominators.
    fn norm_eps() -> Self {
        Self::from_f64(1e-8).unwrap()
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

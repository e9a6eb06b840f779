use core::fmt;
use num_traits::Float;
use rand_distr::uniform::SampleUniform;

/// Scalar element type of tensors and parameters.
///
/// Networks run in `f32`; gradient checks instantiate the same code in `f64`.
/// All transcendental functions come from [`num_traits::Float`] so the crate
/// builds without `std`.
pub trait Element:
    Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + SampleUniform
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

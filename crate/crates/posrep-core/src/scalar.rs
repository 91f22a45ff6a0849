//! Scalar abstraction so the numeric core compiles for both `f32` and `f64`.

use std::fmt;

use num_traits::Float;

/// Floating-point element type for tensors, parameters, and the autodiff
/// graph. Checkpoints always store `f32` on disk; `as_f32`/`from_f32`
/// bridge the stored form and the in-memory scalar.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

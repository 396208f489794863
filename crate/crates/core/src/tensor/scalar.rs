//! Element type abstraction: f64 for gradient checks, f32 for training runs.

use num_traits::Float;

/// Floating-point element of a [`super::Tensor`].
///
/// Everything numeric goes through `num_traits::Float`; this trait only adds
/// the conversions and thread bounds the engine needs. Gradient checking is
/// done in `f64`; training uses `f32`.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    /// Lossy conversion from `f64`; constants are always specified in f64.
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

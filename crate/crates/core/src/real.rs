use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type carried by tensors. Models run in `f32`; gradient checks run the
/// same code in `f64`.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `exp` from libm, identical whichever math backend num-traits is
    /// built with.
    fn libm_exp(self) -> Self;
    fn libm_ln(self) -> Self;
    /// Little-endian bytes of the value narrowed to `f32`.
    fn to_le_f32(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_le_f32(self) -> [u8; 4] {
        self.to_le_bytes()
    }
    #[inline]
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::log(self)
    }
}

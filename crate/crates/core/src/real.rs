//! Scalar abstraction over the two supported arithmetic precisions.
//!
//! All numeric paths are generic over [`Real`] so the same code runs in
//! single precision (the default) and in double precision (gradient checks,
//! deterministic kernel verification).

use serde::{Deserialize, Serialize};

/// Arithmetic precision tag carried by layer files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

/// Floating-point scalar the library is generic over (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Exact error function, used by the erf-based GELU.
    fn erf(self) -> Self;

    /// Convert an `f64` constant into this precision.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// 0/1 multiplier from a mask bit; a single integer-to-float convert in
    /// the kernel's hot loop.
    fn from_bit(b: u8) -> Self;

    /// `v` when the bit is 1, else zero, via an all-ones/all-zeros bit mask.
    /// Integer select with no float multiply.
    fn mask_by_bit(self, b: u8) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_bit(b: u8) -> Self {
        b as f32
    }

    #[inline(always)]
    fn mask_by_bit(self, b: u8) -> Self {
        f32::from_bits(self.to_bits() & (b as u32).wrapping_neg())
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_bit(b: u8) -> Self {
        b as f64
    }

    #[inline(always)]
    fn mask_by_bit(self, b: u8) -> Self {
        f64::from_bits(self.to_bits() & (b as u64).wrapping_neg())
    }
}

//! Fixed-point scalars and IEEE-754 single-precision decomposition.
//!
//! A [`QFormat`] fixes the split between integer and fraction bits of a
//! signed word of 16 or 32 bits. The represented value of a [`FixedPoint`]
//! is `raw / 2^fraction_bits`. Conversions round to nearest, ties to even,
//! and every operation saturates at the representable extremes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum NumericsError {
    #[error("invalid Q-format: {integer_bits} integer + {fraction_bits} fraction bits (word must be 16 or 32 bits)")]
    InvalidFormat { integer_bits: u8, fraction_bits: u8 },
    #[error("value {0:e} is zero, subnormal, infinite or NaN")]
    NonNormalInput(f32),
    #[error("mixed Q-formats: {0} and {1}")]
    FormatMismatch(QFormat, QFormat),
}

/// Signed fixed-point layout: one sign bit, `integer_bits`, `fraction_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    integer_bits: u8,
    fraction_bits: u8,
}

impl QFormat {
    /// Q8.8: 16-bit word, 7 integer bits plus sign, 8 fraction bits.
    pub const Q8_8: QFormat = QFormat {
        integer_bits: 7,
        fraction_bits: 8,
    };
    /// Q16.16 on a 32-bit word.
    pub const Q16_16: QFormat = QFormat {
        integer_bits: 15,
        fraction_bits: 16,
    };

    pub fn new(integer_bits: u8, fraction_bits: u8) -> Result<Self, NumericsError> {
        let word = 1 + integer_bits as u32 + fraction_bits as u32;
        if integer_bits == 0 || fraction_bits == 0 || !(word == 16 || word == 32) {
            return Err(NumericsError::InvalidFormat {
                integer_bits,
                fraction_bits,
            });
        }
        Ok(Self {
            integer_bits,
            fraction_bits,
        })
    }

    pub fn integer_bits(self) -> u8 {
        self.integer_bits
    }

    pub fn fraction_bits(self) -> u8 {
        self.fraction_bits
    }

    /// Word size ω in bits.
    pub fn word_bits(self) -> u32 {
        1 + self.integer_bits as u32 + self.fraction_bits as u32
    }

    pub fn raw_max(self) -> i32 {
        ((1i64 << (self.word_bits() - 1)) - 1) as i32
    }

    pub fn raw_min(self) -> i32 {
        (-(1i64 << (self.word_bits() - 1))) as i32
    }

    /// `2^fraction_bits` as a float.
    pub fn one(self) -> f64 {
        (1u64 << self.fraction_bits) as f64
    }

    /// Largest representable value.
    pub fn max_value(self) -> f64 {
        self.raw_max() as f64 / self.one()
    }

    /// Clamp a wide intermediate into the raw range.
    pub fn saturate(self, wide: i128) -> i32 {
        wide.clamp(self.raw_min() as i128, self.raw_max() as i128) as i32
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat::Q8_8
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.integer_bits + 1, self.fraction_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPoint {
    raw: i32,
    format: QFormat,
}

impl FixedPoint {
    /// Wrap a raw word. Out-of-range raws are saturated.
    pub fn from_raw(raw: i64, format: QFormat) -> Self {
        Self {
            raw: format.saturate(raw as i128),
            format,
        }
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.format
    }

    pub fn to_float(self) -> f64 {
        self.raw as f64 / self.format.one()
    }

    pub fn checked_mul(self, rhs: FixedPoint) -> Result<FixedPoint, NumericsError> {
        if self.format != rhs.format {
            return Err(NumericsError::FormatMismatch(self.format, rhs.format));
        }
        Ok(fx_mul(self, rhs))
    }
}

impl fmt::Display for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_float())
    }
}

/// Round `v` to the nearest integer, ties to even, saturating into `fmt`.
pub fn quantize_raw(v: f64, fmt: QFormat) -> i32 {
    if v.is_nan() {
        return 0;
    }
    let r = v.round_ties_even();
    if r >= fmt.raw_max() as f64 {
        fmt.raw_max()
    } else if r <= fmt.raw_min() as f64 {
        fmt.raw_min()
    } else {
        r as i32
    }
}

pub fn fx_from_float(v: f64, fmt: QFormat) -> FixedPoint {
    FixedPoint {
        raw: quantize_raw(v * fmt.one(), fmt),
        format: fmt,
    }
}

/// Divide a signed wide integer by `2^shift`, rounding to nearest, ties to even.
pub fn shift_round_even(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Exact product in a double-width intermediate, rescaled and saturated.
///
/// Operands are expected to share a format; the left operand's format wins.
pub fn fx_mul(a: FixedPoint, b: FixedPoint) -> FixedPoint {
    debug_assert_eq!(a.format, b.format);
    let fmt = a.format;
    let wide = a.raw as i128 * b.raw as i128;
    let scaled = shift_round_even(wide, fmt.fraction_bits as u32);
    FixedPoint {
        raw: fmt.saturate(scaled),
        format: fmt,
    }
}

pub const F32_EXPONENT_BIAS: i32 = 127;
pub const F32_MANTISSA_BITS: u32 = 23;
/// `M_max = 2^23`.
pub const F32_MANTISSA_MAX: u32 = 1 << F32_MANTISSA_BITS;

/// Sign, biased exponent and mantissa fields of a normal `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatDecomposition {
    pub sign: u8,
    pub biased_exponent: u8,
    pub mantissa: u32,
}

impl FloatDecomposition {
    /// Unbiased exponent `E - E0`.
    pub fn exponent(self) -> i32 {
        self.biased_exponent as i32 - F32_EXPONENT_BIAS
    }

    pub fn recompose(self) -> f32 {
        f32::from_bits(
            ((self.sign as u32) << 31)
                | ((self.biased_exponent as u32) << F32_MANTISSA_BITS)
                | (self.mantissa & (F32_MANTISSA_MAX - 1)),
        )
    }
}

/// Split a finite normal float into its bit fields.
///
/// Zero and subnormals are rejected: callers treat them as zero and take
/// the zero-operand path instead.
pub fn float_decompose(v: f32) -> Result<FloatDecomposition, NumericsError> {
    if !v.is_normal() {
        return Err(NumericsError::NonNormalInput(v));
    }
    let bits = v.to_bits();
    Ok(FloatDecomposition {
        sign: (bits >> 31) as u8,
        biased_exponent: ((bits >> F32_MANTISSA_BITS) & 0xFF) as u8,
        mantissa: bits & (F32_MANTISSA_MAX - 1),
    })
}

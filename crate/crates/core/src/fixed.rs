//! Two's-complement fixed-point arithmetic.
//!
//! A [`FixedFormat`] is a `Qm.n` format with `m` integer bits (sign
//! included) and `n = total - m` fractional bits. Conversions round to
//! nearest, ties to even, and saturate at the format bounds. Dot products
//! accumulate exact products into a wide [`Accumulator`]; rounding happens
//! once, when the accumulator is narrowed back into an output format.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    total_bits: u32,
    integer_bits: u32,
}

impl FixedFormat {
    /// 16-bit weights, 4 integer bits.
    pub const WEIGHT: FixedFormat = FixedFormat {
        total_bits: 16,
        integer_bits: 4,
    };
    /// 20-bit activations, 10 integer bits.
    pub const ACTIVATION: FixedFormat = FixedFormat {
        total_bits: 20,
        integer_bits: 10,
    };
    /// Euler step size `h = 1/C`; never exceeds 1.
    pub const STEP: FixedFormat = FixedFormat {
        total_bits: 18,
        integer_bits: 2,
    };

    pub fn new(total_bits: u32, integer_bits: u32) -> Result<Self> {
        if !(4..=32).contains(&total_bits) || integer_bits == 0 || integer_bits >= total_bits {
            return Err(Error::InvalidFormat {
                total_bits,
                integer_bits,
                frac_bits: total_bits as i64 - integer_bits as i64,
            });
        }
        Ok(Self {
            total_bits,
            integer_bits,
        })
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits
    }

    pub fn integer_bits(self) -> u32 {
        self.integer_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.total_bits - self.integer_bits
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_value(self) -> f64 {
        self.to_f64(self.max_raw())
    }

    pub fn min_value(self) -> f64 {
        self.to_f64(self.min_raw())
    }

    /// Value of one least-significant bit.
    pub fn resolution(self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    pub fn saturate(self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }

    pub fn to_f64(self, raw: i64) -> f64 {
        raw as f64 * self.resolution()
    }

    /// Nearest raw code for `x`, ties to even, saturating. NaN maps to 0.
    pub fn raw_from_f64(self, x: f64) -> i64 {
        if x.is_nan() {
            return 0;
        }
        let scaled = (x * (self.frac_bits() as f64).exp2()).round_ties_even();
        if scaled >= self.max_raw() as f64 {
            self.max_raw()
        } else if scaled <= self.min_raw() as f64 {
            self.min_raw()
        } else {
            scaled as i64
        }
    }

    pub fn quantize(self, x: f64) -> FixedScalar {
        FixedScalar {
            raw: self.raw_from_f64(x),
            format: self,
        }
    }

    /// Re-express `raw`, which carries `from_frac` fractional bits, in this
    /// format.
    pub fn requantize(self, raw: i128, from_frac: u32) -> i64 {
        let to_frac = self.frac_bits();
        let aligned = if from_frac >= to_frac {
            round_shift(raw, from_frac - to_frac)
        } else {
            raw << (to_frac - from_frac)
        };
        self.saturate(aligned)
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.integer_bits, self.frac_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedScalar {
    raw: i64,
    format: FixedFormat,
}

impl FixedScalar {
    pub fn from_raw(raw: i64, format: FixedFormat) -> Result<Self> {
        if !format.contains_raw(raw) {
            return Err(Error::FormatMismatch(format!(
                "raw value {raw} is not representable in {format}"
            )));
        }
        Ok(Self { raw, format })
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> FixedFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        self.format.to_f64(self.raw)
    }
}

pub fn quantize_to_fixed(x: f64, format: FixedFormat) -> FixedScalar {
    format.quantize(x)
}

/// Arithmetic right shift by `shift` bits with round-half-to-even.
pub fn round_shift(value: i128, shift: u32) -> i128 {
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

/// `round(num / den)` with ties away from zero. `den` must be positive.
pub fn div_round_half_away(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.abs() / den;
    let r = num.abs() % den;
    let q = if 2 * r >= den { q + 1 } else { q };
    if num < 0 {
        -q
    } else {
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatorSpec {
    pub width_bits: u32,
}

impl AccumulatorSpec {
    /// Wide enough for a 2304-term dot product of 20-bit activations and
    /// 16-bit weights (the 3x3, 256-channel convolution).
    pub const DEFAULT: AccumulatorSpec = AccumulatorSpec { width_bits: 48 };

    pub fn bound(self) -> i128 {
        1i128 << (self.width_bits - 1)
    }

    pub fn check(self, value: i128) -> Result<()> {
        let bound = self.bound();
        if value >= bound || value < -bound {
            return Err(Error::AccumulatorOverflow {
                value,
                width_bits: self.width_bits,
            });
        }
        Ok(())
    }
}

impl Default for AccumulatorSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Exact multiply-accumulate register.
///
/// Every product of an `a`-format and a `b`-format operand carries
/// `frac(a) + frac(b)` fractional bits; the accumulator holds the sum at
/// that precision without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    value: i128,
    frac_bits: u32,
    spec: AccumulatorSpec,
}

impl Accumulator {
    pub fn new(spec: AccumulatorSpec, frac_bits: u32) -> Self {
        Self {
            value: 0,
            frac_bits,
            spec,
        }
    }

    /// Accumulator sized for products of `a` and `b`.
    pub fn for_product(spec: AccumulatorSpec, a: FixedFormat, b: FixedFormat) -> Self {
        Self::new(spec, a.frac_bits() + b.frac_bits())
    }

    pub fn value_raw(self) -> i128 {
        self.value
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn to_f64(self) -> f64 {
        self.value as f64 * (-(self.frac_bits as f64)).exp2()
    }

    pub fn mul_add(mut self, a: FixedScalar, b: FixedScalar) -> Result<Self> {
        let frac = a.format.frac_bits() + b.format.frac_bits();
        if frac != self.frac_bits {
            return Err(Error::FormatMismatch(format!(
                "product of {} and {} has {frac} fractional bits, accumulator has {}",
                a.format, b.format, self.frac_bits
            )));
        }
        self.value += a.raw as i128 * b.raw as i128;
        self.spec.check(self.value)?;
        Ok(self)
    }

    /// Single rounding step into `format` (ties to even, saturating).
    pub fn to_format(self, format: FixedFormat) -> FixedScalar {
        FixedScalar {
            raw: format.requantize(self.value, self.frac_bits),
            format,
        }
    }
}

pub fn fixed_mul_acc(acc: Accumulator, a: FixedScalar, b: FixedScalar) -> Result<Accumulator> {
    acc.mul_add(a, b)
}

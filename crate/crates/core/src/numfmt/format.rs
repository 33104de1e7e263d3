use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use super::NumError;

/// Binary floating-point layout: sign bit, biased exponent, stored fraction.
///
/// Semantics follow IEEE 754-2008 (subnormals, signed zeros, infinities,
/// NaN) for every supported width, so `float(8,23)` is binary32 and
/// `float(11,52)` is binary64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FloatFormat {
    exponent_bits: u32,
    significand_bits: u32,
}

impl FloatFormat {
    pub const BINARY64: FloatFormat = FloatFormat { exponent_bits: 11, significand_bits: 52 };
    pub const BINARY32: FloatFormat = FloatFormat { exponent_bits: 8, significand_bits: 23 };
    pub const BINARY16: FloatFormat = FloatFormat { exponent_bits: 5, significand_bits: 10 };

    pub fn new(exponent_bits: u32, significand_bits: u32) -> Result<Self, NumError> {
        if !(2..=11).contains(&exponent_bits) {
            return Err(NumError::OutOfRange { field: "exponent_bits", value: exponent_bits as f64 });
        }
        if !(1..=52).contains(&significand_bits) {
            return Err(NumError::OutOfRange { field: "significand_bits", value: significand_bits as f64 });
        }
        // With the per-field caps above this can only trip for (11, 52)+,
        // which is exactly 64 bits; kept as the stated layout invariant.
        if 1 + exponent_bits + significand_bits > 64 {
            return Err(NumError::OutOfRange {
                field: "total_bits",
                value: (1 + exponent_bits + significand_bits) as f64,
            });
        }
        Ok(FloatFormat { exponent_bits, significand_bits })
    }

    #[inline]
    pub fn exponent_bits(self) -> u32 {
        self.exponent_bits
    }

    /// Stored fraction bits (the implicit leading bit is not counted).
    #[inline]
    pub fn significand_bits(self) -> u32 {
        self.significand_bits
    }

    #[inline]
    pub fn total_bits(self) -> u32 {
        1 + self.exponent_bits + self.significand_bits
    }

    #[inline]
    pub(crate) fn bias(self) -> i32 {
        (1i32 << (self.exponent_bits - 1)) - 1
    }

    /// Unbiased exponent of the smallest normal number.
    #[inline]
    pub(crate) fn emin(self) -> i32 {
        1 - self.bias()
    }

    #[inline]
    pub(crate) fn emax(self) -> i32 {
        self.bias()
    }

    #[inline]
    pub(crate) fn frac_mask(self) -> u64 {
        (1u64 << self.significand_bits) - 1
    }

    #[inline]
    pub(crate) fn exp_field_max(self) -> u64 {
        (1u64 << self.exponent_bits) - 1
    }

    #[inline]
    pub(crate) fn sign_bit(self) -> u64 {
        1u64 << (self.exponent_bits + self.significand_bits)
    }

    #[inline]
    pub(crate) fn inf_bits(self) -> u64 {
        self.exp_field_max() << self.significand_bits
    }

    /// The single canonical quiet NaN: positive, top fraction bit set.
    #[inline]
    pub fn nan_bits(self) -> u64 {
        self.inf_bits() | (1u64 << (self.significand_bits - 1))
    }

    /// Largest finite value.
    pub fn max_finite(self) -> f64 {
        let frac = 2.0 - libm::ldexp(1.0, -(self.significand_bits as i32));
        libm::ldexp(frac, self.emax())
    }
}

/// Affine integer layout: `value = scale * (code - zero_point)` for
/// unsigned codes in `0..2^bit_width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFormat {
    bit_width: u32,
    scale: f64,
    zero_point: u32,
}

impl AffineFormat {
    pub fn new(bit_width: u32, scale: f64, zero_point: u32) -> Result<Self, NumError> {
        if !(2..=32).contains(&bit_width) {
            return Err(NumError::OutOfRange { field: "bit_width", value: bit_width as f64 });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(NumError::OutOfRange { field: "scale", value: scale });
        }
        if u64::from(zero_point) > (1u64 << bit_width) - 1 {
            return Err(NumError::OutOfRange { field: "zero_point", value: zero_point as f64 });
        }
        Ok(AffineFormat { bit_width, scale, zero_point })
    }

    #[inline]
    pub fn bit_width(self) -> u32 {
        self.bit_width
    }

    #[inline]
    pub fn scale(self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn zero_point(self) -> u32 {
        self.zero_point
    }

    #[inline]
    pub fn max_code(self) -> u64 {
        (1u64 << self.bit_width) - 1
    }
}

/// A numeric representation a scalar can be stored and computed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalarFormat {
    Float(FloatFormat),
    Affine(AffineFormat),
}

impl ScalarFormat {
    pub const F64: ScalarFormat = ScalarFormat::Float(FloatFormat::BINARY64);
    pub const F32: ScalarFormat = ScalarFormat::Float(FloatFormat::BINARY32);
    pub const F16: ScalarFormat = ScalarFormat::Float(FloatFormat::BINARY16);

    pub fn float(exponent_bits: u32, significand_bits: u32) -> Result<Self, NumError> {
        FloatFormat::new(exponent_bits, significand_bits).map(ScalarFormat::Float)
    }

    pub fn affine(bit_width: u32, scale: f64, zero_point: u32) -> Result<Self, NumError> {
        AffineFormat::new(bit_width, scale, zero_point).map(ScalarFormat::Affine)
    }

    pub fn total_bits(self) -> u32 {
        match self {
            ScalarFormat::Float(f) => f.total_bits(),
            ScalarFormat::Affine(a) => a.bit_width(),
        }
    }

    /// Bytes used to store one scalar: `ceil(total_bits / 8)`.
    pub fn byte_width(self) -> u64 {
        u64::from(self.total_bits()).div_ceil(8)
    }

    pub fn as_float(self) -> Option<FloatFormat> {
        match self {
            ScalarFormat::Float(f) => Some(f),
            ScalarFormat::Affine(_) => None,
        }
    }
}

/// Parses a format descriptor:
/// `f64 | f32 | f16 | float(E,S) | u8affine(scale,zero) | int(W,scale,zero)`.
pub fn make_format(descriptor: &str) -> Result<ScalarFormat, NumError> {
    descriptor.parse()
}

impl FromStr for ScalarFormat {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "f64" => return Ok(ScalarFormat::F64),
            "f32" => return Ok(ScalarFormat::F32),
            "f16" => return Ok(ScalarFormat::F16),
            _ => {}
        }
        let syntax = || NumError::Syntax(s.to_string());
        let open = s.find('(').ok_or_else(syntax)?;
        if !s.ends_with(')') {
            return Err(syntax());
        }
        let head = s[..open].trim();
        let args: alloc::vec::Vec<&str> = s[open + 1..s.len() - 1].split(',').map(str::trim).collect();
        let int_arg = |a: &str| a.parse::<u32>().map_err(|_| syntax());
        let real_arg = |a: &str| a.parse::<f64>().map_err(|_| syntax());
        match (head, args.as_slice()) {
            ("float", [e, m]) => ScalarFormat::float(int_arg(e)?, int_arg(m)?),
            ("u8affine", [scale, zero]) => ScalarFormat::affine(8, real_arg(scale)?, int_arg(zero)?),
            ("int", [w, scale, zero]) => ScalarFormat::affine(int_arg(w)?, real_arg(scale)?, int_arg(zero)?),
            _ => Err(syntax()),
        }
    }
}

impl fmt::Display for ScalarFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ScalarFormat::F64 => f.write_str("f64"),
            ScalarFormat::F32 => f.write_str("f32"),
            ScalarFormat::F16 => f.write_str("f16"),
            ScalarFormat::Float(ff) => write!(f, "float({},{})", ff.exponent_bits, ff.significand_bits),
            ScalarFormat::Affine(a) if a.bit_width == 8 => {
                write!(f, "u8affine({},{})", real(a.scale), a.zero_point)
            }
            ScalarFormat::Affine(a) => write!(f, "int({},{},{})", a.bit_width, real(a.scale), a.zero_point),
        }
    }
}

// Shortest round-trip spelling, so Display/FromStr are inverse.
fn real(x: f64) -> String {
    format!("{x:?}")
}

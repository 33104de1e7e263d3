//! Configurable-precision scalar formats and their arithmetic.
//!
//! Every operation takes exact operand values, computes the exact result,
//! and rounds once into the destination format (round-to-nearest-even).
//! Binary floating formats are emulated bit-for-bit, so `float(8,23)` and
//! `float(11,52)` agree with hardware single and double precision.
//!
//! Affine integer formats are dequantized to binary64, computed there, and
//! re-encoded with saturation.

mod format;
pub(crate) mod soft;

pub use format::{make_format, AffineFormat, FloatFormat, ScalarFormat};

use alloc::string::String;
use soft::Unpacked;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("cannot parse format descriptor `{0}`")]
    Syntax(String),
    #[error("NaN has no affine integer encoding")]
    NanToAffine,
}

/// A bit pattern tagged with the format it is encoded in.
///
/// Bits above the format's total width are always zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodedScalar {
    pub bits: u64,
    pub format: ScalarFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transcendental {
    Exp,
    Sigmoid,
    Log,
}

/// Rounds `x` into `format`. Fails only for NaN into an affine format.
pub fn encode(x: f64, format: ScalarFormat) -> Result<EncodedScalar, NumError> {
    let bits = match format {
        ScalarFormat::Float(ff) => encode_float(x, ff),
        ScalarFormat::Affine(af) => {
            if x.is_nan() {
                return Err(NumError::NanToAffine);
            }
            encode_affine(x, af)
        }
    };
    Ok(EncodedScalar { bits, format })
}

/// Exact value of a pattern. Binary formats with at most 11 exponent and
/// 52 fraction bits embed exactly in binary64; affine values are
/// `scale * (code - zero_point)` evaluated in binary64.
pub fn decode(s: EncodedScalar) -> f64 {
    decode_bits(s.bits, s.format)
}

pub fn arith(op: ArithOp, a: EncodedScalar, b: EncodedScalar, format: ScalarFormat) -> EncodedScalar {
    EncodedScalar { bits: arith_bits(op, a.bits, a.format, b.bits, b.format, format), format }
}

pub fn transcend(func: Transcendental, a: EncodedScalar, format: ScalarFormat) -> EncodedScalar {
    let x = decode(a);
    let y = match func {
        Transcendental::Exp => libm::exp(x),
        Transcendental::Sigmoid => sigmoid_f64(x),
        Transcendental::Log => log_f64(x),
    };
    EncodedScalar { bits: encode_total(y, format), format }
}

pub fn convert(s: EncodedScalar, to: ScalarFormat) -> EncodedScalar {
    EncodedScalar { bits: convert_bits(s.bits, s.format, to), format: to }
}

/// Logistic function with exact limits at the infinities.
#[inline]
pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else if x < 0.0 {
        let e = libm::exp(x);
        e / (1.0 + e)
    } else {
        f64::NAN
    }
}

/// Natural log; non-positive arguments (including -0) give NaN.
#[inline]
pub(crate) fn log_f64(x: f64) -> f64 {
    if x > 0.0 {
        libm::log(x)
    } else {
        f64::NAN
    }
}

#[inline]
pub(crate) fn encode_float(x: f64, ff: FloatFormat) -> u64 {
    if ff == FloatFormat::BINARY64 {
        return if x.is_nan() { ff.nan_bits() } else { x.to_bits() };
    }
    ff.pack(FloatFormat::BINARY64.unpack(x.to_bits()))
}

pub(crate) fn encode_affine(x: f64, af: AffineFormat) -> u64 {
    let q = libm::rint(x / af.scale()) + f64::from(af.zero_point());
    if q <= 0.0 {
        0
    } else if q >= af.max_code() as f64 {
        af.max_code()
    } else {
        q as u64
    }
}

/// Total encoding used inside arithmetic: NaN into an affine format maps to
/// the zero code (the pattern for 0.0).
#[inline]
pub(crate) fn encode_total(x: f64, format: ScalarFormat) -> u64 {
    match format {
        ScalarFormat::Float(ff) => encode_float(x, ff),
        ScalarFormat::Affine(af) if x.is_nan() => u64::from(af.zero_point()),
        ScalarFormat::Affine(af) => encode_affine(x, af),
    }
}

#[inline]
pub(crate) fn decode_bits(bits: u64, format: ScalarFormat) -> f64 {
    match format {
        ScalarFormat::Float(ff) if ff == FloatFormat::BINARY64 => f64::from_bits(bits),
        ScalarFormat::Float(ff) => f64::from_bits(FloatFormat::BINARY64.pack(ff.unpack(bits))),
        ScalarFormat::Affine(af) => (bits as i64 - i64::from(af.zero_point())) as f64 * af.scale(),
    }
}

#[inline]
fn unpack_any(bits: u64, format: ScalarFormat) -> Unpacked {
    match format {
        ScalarFormat::Float(ff) => ff.unpack(bits),
        ScalarFormat::Affine(_) => FloatFormat::BINARY64.unpack(decode_bits(bits, format).to_bits()),
    }
}

#[inline]
pub(crate) fn convert_bits(bits: u64, from: ScalarFormat, to: ScalarFormat) -> u64 {
    match (from, to) {
        (ScalarFormat::Float(a), ScalarFormat::Float(b)) if a == b => {
            if a.unpack(bits) == Unpacked::Nan {
                a.nan_bits()
            } else {
                bits
            }
        }
        (ScalarFormat::Float(a), ScalarFormat::Float(b)) => b.pack(a.unpack(bits)),
        _ => encode_total(decode_bits(bits, from), to),
    }
}

pub(crate) fn arith_bits(
    op: ArithOp,
    a: u64,
    a_fmt: ScalarFormat,
    b: u64,
    b_fmt: ScalarFormat,
    to: ScalarFormat,
) -> u64 {
    match to {
        ScalarFormat::Float(ff) => {
            let x = unpack_any(a, a_fmt);
            let y = unpack_any(b, b_fmt);
            match op {
                ArithOp::Add => soft::add(x, y, ff),
                ArithOp::Sub => soft::add(x, soft::negate(y), ff),
                ArithOp::Mul => soft::mul(x, y, ff),
                ArithOp::Div => soft::div(x, y, ff),
            }
        }
        ScalarFormat::Affine(_) => {
            let x = decode_bits(a, a_fmt);
            let y = decode_bits(b, b_fmt);
            let r = match op {
                ArithOp::Add => x + y,
                ArithOp::Sub => x - y,
                ArithOp::Mul => x * y,
                ArithOp::Div => x / y,
            };
            encode_total(r, to)
        }
    }
}

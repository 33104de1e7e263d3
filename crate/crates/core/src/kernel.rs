//! Scalar backends the training loops are monomorphized over.
//!
//! `Soft` runs every operation through the bit-level emulation. For the two
//! formats the hardware implements exactly (binary32, binary64) the native
//! backends produce the same bit patterns, including canonical NaNs, and are
//! selected automatically unless emulation is forced.

use crate::numfmt::{self, soft, ArithOp, FloatFormat, ScalarFormat};

/// Which arithmetic implementation runs a computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    /// Hardware arithmetic for binary32/binary64, emulation otherwise.
    #[default]
    Auto,
    /// Bit-level emulation for every format.
    Emulated,
}

pub(crate) trait Kernel: Copy + Send + Sync {
    type W: Copy + Send + Sync + PartialEq + core::fmt::Debug;

    fn format(&self) -> ScalarFormat;
    fn load(&self, bits: u64) -> Self::W;
    fn store(&self, w: Self::W) -> u64;
    fn encode(&self, x: f64) -> Self::W;
    fn decode(&self, w: Self::W) -> f64;
    fn add(&self, a: Self::W, b: Self::W) -> Self::W;
    fn sub(&self, a: Self::W, b: Self::W) -> Self::W;
    fn mul(&self, a: Self::W, b: Self::W) -> Self::W;
    fn div(&self, a: Self::W, b: Self::W) -> Self::W;
    fn sigmoid(&self, a: Self::W) -> Self::W;
    fn log(&self, a: Self::W) -> Self::W;

    #[inline]
    fn zero(&self) -> Self::W {
        self.encode(0.0)
    }

    /// `max` under the numeric order; NaN operands lose.
    #[inline]
    fn max(&self, a: Self::W, b: Self::W) -> Self::W {
        let (x, y) = (self.decode(a), self.decode(b));
        if x.is_nan() || y > x {
            b
        } else {
            a
        }
    }

    /// Loads a pattern stored in another format, converting exactly once.
    #[inline]
    fn load_from(&self, bits: u64, from: ScalarFormat) -> Self::W {
        if from == self.format() {
            self.load(bits)
        } else {
            self.load(numfmt::convert_bits(bits, from, self.format()))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NativeF64;

#[derive(Clone, Copy, Debug)]
pub(crate) struct NativeF32;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Soft(pub ScalarFormat);

const F64_NAN: u64 = 0x7FF8_0000_0000_0000;
const F32_NAN: u32 = 0x7FC0_0000;

#[inline(always)]
fn canon64(x: f64) -> f64 {
    if x.is_nan() {
        f64::from_bits(F64_NAN)
    } else {
        x
    }
}

#[inline(always)]
fn canon32(x: f32) -> f32 {
    if x.is_nan() {
        f32::from_bits(F32_NAN)
    } else {
        x
    }
}

impl Kernel for NativeF64 {
    type W = f64;

    fn format(&self) -> ScalarFormat {
        ScalarFormat::F64
    }
    #[inline(always)]
    fn load(&self, bits: u64) -> f64 {
        f64::from_bits(bits)
    }
    #[inline(always)]
    fn store(&self, w: f64) -> u64 {
        w.to_bits()
    }
    #[inline(always)]
    fn encode(&self, x: f64) -> f64 {
        canon64(x)
    }
    #[inline(always)]
    fn decode(&self, w: f64) -> f64 {
        w
    }
    #[inline(always)]
    fn add(&self, a: f64, b: f64) -> f64 {
        canon64(a + b)
    }
    #[inline(always)]
    fn sub(&self, a: f64, b: f64) -> f64 {
        canon64(a - b)
    }
    #[inline(always)]
    fn mul(&self, a: f64, b: f64) -> f64 {
        canon64(a * b)
    }
    #[inline(always)]
    fn div(&self, a: f64, b: f64) -> f64 {
        canon64(a / b)
    }
    #[inline]
    fn sigmoid(&self, a: f64) -> f64 {
        canon64(numfmt::sigmoid_f64(a))
    }
    #[inline]
    fn log(&self, a: f64) -> f64 {
        canon64(numfmt::log_f64(a))
    }
}

impl Kernel for NativeF32 {
    type W = f32;

    fn format(&self) -> ScalarFormat {
        ScalarFormat::F32
    }
    #[inline(always)]
    fn load(&self, bits: u64) -> f32 {
        f32::from_bits(bits as u32)
    }
    #[inline(always)]
    fn store(&self, w: f32) -> u64 {
        u64::from(w.to_bits())
    }
    #[inline(always)]
    fn encode(&self, x: f64) -> f32 {
        canon32(x as f32)
    }
    #[inline(always)]
    fn decode(&self, w: f32) -> f64 {
        f64::from(w)
    }
    #[inline(always)]
    fn add(&self, a: f32, b: f32) -> f32 {
        canon32(a + b)
    }
    #[inline(always)]
    fn sub(&self, a: f32, b: f32) -> f32 {
        canon32(a - b)
    }
    #[inline(always)]
    fn mul(&self, a: f32, b: f32) -> f32 {
        canon32(a * b)
    }
    #[inline(always)]
    fn div(&self, a: f32, b: f32) -> f32 {
        canon32(a / b)
    }
    #[inline]
    fn sigmoid(&self, a: f32) -> f32 {
        canon32(numfmt::sigmoid_f64(f64::from(a)) as f32)
    }
    #[inline]
    fn log(&self, a: f32) -> f32 {
        canon32(numfmt::log_f64(f64::from(a)) as f32)
    }
}

impl Soft {
    #[inline]
    fn binary(&self, op: ArithOp, a: u64, b: u64) -> u64 {
        match self.0 {
            ScalarFormat::Float(ff) => float_op(ff, op, a, b),
            fmt => numfmt::arith_bits(op, a, fmt, b, fmt, fmt),
        }
    }
}

#[inline]
fn float_op(ff: FloatFormat, op: ArithOp, a: u64, b: u64) -> u64 {
    let (x, y) = (ff.unpack(a), ff.unpack(b));
    match op {
        ArithOp::Add => soft::add(x, y, ff),
        ArithOp::Sub => soft::add(x, soft::negate(y), ff),
        ArithOp::Mul => soft::mul(x, y, ff),
        ArithOp::Div => soft::div(x, y, ff),
    }
}

impl Kernel for Soft {
    type W = u64;

    fn format(&self) -> ScalarFormat {
        self.0
    }
    #[inline(always)]
    fn load(&self, bits: u64) -> u64 {
        bits
    }
    #[inline(always)]
    fn store(&self, w: u64) -> u64 {
        w
    }
    #[inline]
    fn encode(&self, x: f64) -> u64 {
        numfmt::encode_total(x, self.0)
    }
    #[inline]
    fn decode(&self, w: u64) -> f64 {
        numfmt::decode_bits(w, self.0)
    }
    #[inline]
    fn add(&self, a: u64, b: u64) -> u64 {
        self.binary(ArithOp::Add, a, b)
    }
    #[inline]
    fn sub(&self, a: u64, b: u64) -> u64 {
        self.binary(ArithOp::Sub, a, b)
    }
    #[inline]
    fn mul(&self, a: u64, b: u64) -> u64 {
        self.binary(ArithOp::Mul, a, b)
    }
    #[inline]
    fn div(&self, a: u64, b: u64) -> u64 {
        self.binary(ArithOp::Div, a, b)
    }
    #[inline]
    fn sigmoid(&self, a: u64) -> u64 {
        numfmt::encode_total(numfmt::sigmoid_f64(self.decode(a)), self.0)
    }
    #[inline]
    fn log(&self, a: u64) -> u64 {
        numfmt::encode_total(numfmt::log_f64(self.decode(a)), self.0)
    }
}

/// Runs `$body` with `$k` bound to the backend selected for `$fmt`.
macro_rules! with_kernel {
    ($fmt:expr, $exec:expr, |$k:ident| $body:expr) => {{
        let fmt: $crate::numfmt::ScalarFormat = $fmt;
        match ($exec, fmt) {
            ($crate::kernel::Exec::Auto, $crate::numfmt::ScalarFormat::F64) => {
                let $k = $crate::kernel::NativeF64;
                $body
            }
            ($crate::kernel::Exec::Auto, $crate::numfmt::ScalarFormat::F32) => {
                let $k = $crate::kernel::NativeF32;
                $body
            }
            _ => {
                let $k = $crate::kernel::Soft(fmt);
                $body
            }
        }
    }};
}
pub(crate) use with_kernel;

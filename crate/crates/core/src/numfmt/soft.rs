//! Correctly rounded binary floating-point arithmetic on raw bit patterns.
//!
//! Operands are unpacked into an exact `sig * 2^exp` form, combined in a
//! 128-bit integer window (with a sticky bit jammed into bit 0 whenever
//! low-order bits are shifted out), and rounded exactly once to the target
//! layout under round-to-nearest-even.

use super::format::FloatFormat;

/// Exact value of a floating-point pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unpacked {
    Nan,
    Inf(bool),
    Zero(bool),
    /// `(-1)^neg * sig * 2^exp`, `sig != 0`, at most 53 significant bits.
    Finite { neg: bool, exp: i32, sig: u64 },
}

impl FloatFormat {
    pub(crate) fn unpack(self, bits: u64) -> Unpacked {
        let f = self.significand_bits();
        let neg = bits & self.sign_bit() != 0;
        let frac = bits & self.frac_mask();
        let field = (bits >> f) & self.exp_field_max();
        if field == self.exp_field_max() {
            if frac == 0 {
                Unpacked::Inf(neg)
            } else {
                Unpacked::Nan
            }
        } else if field == 0 {
            if frac == 0 {
                Unpacked::Zero(neg)
            } else {
                Unpacked::Finite { neg, exp: self.emin() - f as i32, sig: frac }
            }
        } else {
            Unpacked::Finite { neg, exp: field as i32 - self.bias() - f as i32, sig: frac | (1u64 << f) }
        }
    }

    pub(crate) fn pack(self, value: Unpacked) -> u64 {
        match value {
            Unpacked::Nan => self.nan_bits(),
            Unpacked::Inf(neg) => self.signed(neg, self.inf_bits()),
            Unpacked::Zero(neg) => self.signed(neg, 0),
            Unpacked::Finite { neg, exp, sig } => self.round_pack(neg, exp, u128::from(sig)),
        }
    }

    #[inline]
    fn signed(self, neg: bool, magnitude: u64) -> u64 {
        if neg {
            magnitude | self.sign_bit()
        } else {
            magnitude
        }
    }

    /// Rounds `(-1)^neg * sig * 2^exp` to this layout (ties to even).
    ///
    /// Bit 0 of `sig` may carry a jammed sticky bit; callers guarantee it sits
    /// at least two places below the rounding position.
    pub(crate) fn round_pack(self, neg: bool, exp: i32, sig: u128) -> u64 {
        debug_assert!(sig != 0);
        let f = self.significand_bits() as i32;
        let msb = 127 - sig.leading_zeros() as i32;
        let lead = exp + msb;
        let mut quantum = lead.max(self.emin()) - f;
        let shift = quantum - exp;
        let mut m: u128 = if shift <= 0 {
            sig << (-shift) as u32
        } else if shift > 128 {
            0
        } else {
            let (kept, rem, half) = if shift == 128 {
                (0u128, sig, 1u128 << 127)
            } else {
                (sig >> shift, sig & ((1u128 << shift) - 1), 1u128 << (shift - 1))
            };
            if rem > half || (rem == half && kept & 1 == 1) {
                kept + 1
            } else {
                kept
            }
        };
        if m == 1u128 << (f + 1) {
            m >>= 1;
            quantum += 1;
        }
        if m == 0 {
            return self.signed(neg, 0);
        }
        let m = m as u64;
        if m >= 1u64 << f {
            let e = quantum + f;
            if e > self.emax() {
                return self.signed(neg, self.inf_bits());
            }
            let field = (e + self.bias()) as u64;
            self.signed(neg, (field << f) | (m & self.frac_mask()))
        } else {
            self.signed(neg, m)
        }
    }
}

#[inline]
fn shift_right_jam(x: u128, d: u32) -> u128 {
    if d == 0 {
        x
    } else if d >= 128 {
        u128::from(x != 0)
    } else {
        (x >> d) | u128::from(x & ((1u128 << d) - 1) != 0)
    }
}

/// Normalizes so the leading one sits at bit `top`.
#[inline]
fn normalize(exp: i32, sig: u64, top: u32) -> (i32, u128) {
    let sig = u128::from(sig);
    let msb = 127 - sig.leading_zeros();
    let s = top - msb;
    (exp - s as i32, sig << s)
}

pub(crate) fn add(x: Unpacked, y: Unpacked, to: FloatFormat) -> u64 {
    use Unpacked::*;
    match (x, y) {
        (Nan, _) | (_, Nan) => to.nan_bits(),
        (Inf(a), Inf(b)) => {
            if a == b {
                to.pack(Inf(a))
            } else {
                to.nan_bits()
            }
        }
        (Inf(a), _) | (_, Inf(a)) => to.pack(Inf(a)),
        (Zero(a), Zero(b)) => to.pack(Zero(a && b)),
        (Zero(_), v) | (v, Zero(_)) => to.pack(v),
        (Finite { neg: na, exp: ea, sig: sa }, Finite { neg: nb, exp: eb, sig: sb }) => {
            let (ea, sa) = normalize(ea, sa, 125);
            let (eb, sb) = normalize(eb, sb, 125);
            let ((nbig, ebig, sbig), (nsmall, esmall, ssmall)) =
                if (ea, sa) >= (eb, sb) { ((na, ea, sa), (nb, eb, sb)) } else { ((nb, eb, sb), (na, ea, sa)) };
            let d = (ebig - esmall) as u32;
            let ssmall = shift_right_jam(ssmall, d);
            let sum = if nbig == nsmall { sbig + ssmall } else { sbig - ssmall };
            if sum == 0 {
                return to.pack(Zero(false));
            }
            to.round_pack(nbig, ebig, sum)
        }
    }
}

#[inline]
pub(crate) fn negate(x: Unpacked) -> Unpacked {
    match x {
        Unpacked::Nan => Unpacked::Nan,
        Unpacked::Inf(n) => Unpacked::Inf(!n),
        Unpacked::Zero(n) => Unpacked::Zero(!n),
        Unpacked::Finite { neg, exp, sig } => Unpacked::Finite { neg: !neg, exp, sig },
    }
}

fn sign_of(x: Unpacked) -> bool {
    match x {
        Unpacked::Nan => false,
        Unpacked::Inf(n) | Unpacked::Zero(n) | Unpacked::Finite { neg: n, .. } => n,
    }
}

pub(crate) fn mul(x: Unpacked, y: Unpacked, to: FloatFormat) -> u64 {
    use Unpacked::*;
    let neg = sign_of(x) != sign_of(y);
    match (x, y) {
        (Nan, _) | (_, Nan) => to.nan_bits(),
        (Inf(_), Zero(_)) | (Zero(_), Inf(_)) => to.nan_bits(),
        (Inf(_), _) | (_, Inf(_)) => to.pack(Inf(neg)),
        (Zero(_), _) | (_, Zero(_)) => to.pack(Zero(neg)),
        (Finite { exp: ea, sig: sa, .. }, Finite { exp: eb, sig: sb, .. }) => {
            to.round_pack(neg, ea + eb, u128::from(sa) * u128::from(sb))
        }
    }
}

pub(crate) fn div(x: Unpacked, y: Unpacked, to: FloatFormat) -> u64 {
    use Unpacked::*;
    let neg = sign_of(x) != sign_of(y);
    match (x, y) {
        (Nan, _) | (_, Nan) => to.nan_bits(),
        (Inf(_), Inf(_)) | (Zero(_), Zero(_)) => to.nan_bits(),
        (Inf(_), _) | (_, Zero(_)) => to.pack(Inf(neg)),
        (_, Inf(_)) | (Zero(_), _) => to.pack(Zero(neg)),
        (Finite { exp: ea, sig: sa, .. }, Finite { exp: eb, sig: sb, .. }) => {
            let (ea, na) = normalize(ea, sa, 52);
            let (eb, nb) = normalize(eb, sb, 52);
            let num = na << 72;
            let q = num / nb;
            let sticky = u128::from(num % nb != 0);
            to.round_pack(neg, ea - 72 - eb, q | sticky)
        }
    }
}

/// Binary32/binary64 comparisons for the oracle tests live in
/// `tests/softfloat_oracle.rs`; these cover the rounding core directly.
#[cfg(test)]
mod tests {
    use super::*;

    const F16: FloatFormat = FloatFormat::BINARY16;
    const F64: FloatFormat = FloatFormat::BINARY64;

    fn from_f64(x: f64, to: FloatFormat) -> u64 {
        to.pack(F64.unpack(x.to_bits()))
    }

    fn to_f64(bits: u64, from: FloatFormat) -> f64 {
        f64::from_bits(F64.pack(from.unpack(bits)))
    }

    #[test]
    fn f16_specials() {
        assert_eq!(from_f64(1.0, F16), 0x3C00);
        assert_eq!(from_f64(-2.0, F16), 0xC000);
        assert_eq!(from_f64(65504.0, F16), 0x7BFF);
        // halfway between max finite and the next binade rounds to infinity
        assert_eq!(from_f64(65520.0, F16), 0x7C00);
        assert_eq!(from_f64(65519.99, F16), 0x7BFF);
        assert_eq!(from_f64(libm::ldexp(1.0, -24), F16), 0x0001);
        // exactly half of the smallest subnormal ties to even (zero)
        assert_eq!(from_f64(libm::ldexp(1.0, -25), F16), 0x0000);
        assert_eq!(from_f64(libm::ldexp(1.5, -25), F16), 0x0001);
        assert_eq!(from_f64(-0.0, F16), 0x8000);
        assert_eq!(from_f64(f64::NAN, F16), 0x7E00);
    }

    #[test]
    fn subnormal_to_normal_carry() {
        // largest f16 subnormal plus half an ulp rounds (to even) into the smallest normal
        let largest_sub = to_f64(0x03FF, F16);
        let x = largest_sub + libm::ldexp(1.0, -25);
        assert_eq!(from_f64(x, F16), 0x0400);
    }

    #[test]
    fn f16_enumeration_round_trip() {
        for bits in 0u64..=0xFFFF {
            let v = to_f64(bits, F16);
            if v.is_nan() {
                continue;
            }
            assert_eq!(from_f64(v, F16), bits, "{bits:#06x}");
        }
    }

    #[test]
    fn jam_handles_huge_exponent_gaps() {
        let one = F64.unpack(1.0f64.to_bits());
        let tiny = F64.unpack(libm::ldexp(1.0, -1070).to_bits());
        assert_eq!(add(one, tiny, F64), 1.0f64.to_bits());
        assert_eq!(add(one, negate(tiny), F64), 1.0f64.to_bits());
        // 1 - tiny rounded to a 2-bit-fraction format stays 1
        let f = FloatFormat::new(4, 2).unwrap();
        assert_eq!(to_f64(add(one, negate(tiny), f), f), 1.0);
    }

    #[test]
    fn exact_cancellation_is_positive_zero() {
        let a = F64.unpack(3.5f64.to_bits());
        assert_eq!(add(a, negate(a), F64), 0);
    }
}

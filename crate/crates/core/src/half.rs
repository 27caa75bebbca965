//! Software IEEE 754 binary16 ("half") arithmetic.
//!
//! Storage formats and rounding behavior are emulated exactly: conversions
//! round to nearest-even, subnormals are honored (no flush-to-zero), and
//! overflow saturates to infinity just past the maximum finite value 65504.
//! Keeping the emulation in software makes every run bit-reproducible across
//! hosts, which the determinism guarantees elsewhere in the crate lean on.

/// A binary16 value stored as its raw bit pattern.
///
/// Layout: 1 sign bit, 5 exponent bits (bias 15), 10 mantissa bits.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Half(pub u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3C00);
    /// Largest finite value, 65504.0.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive subnormal, 2^-24.
    pub const MIN_POSITIVE: Half = Half(0x0001);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const NAN: Half = Half(0x7E00);

    #[inline]
    pub fn from_f32(x: f32) -> Half {
        Half(f32_to_f16_bits(x))
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16_bits_to_f32(self.0)
    }

    #[inline]
    pub fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        (self.0 & 0x7FFF) > 0x7C00
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        (self.0 & 0x7FFF) == 0x7C00
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        (self.0 & 0x7C00) != 0x7C00
    }
}

/// Convert an f32 to binary16 bits, rounding to nearest-even.
///
/// Subnormal results are produced exactly (no flush to zero); values whose
/// rounded magnitude exceeds 65504 become infinity; NaN becomes a quiet NaN
/// (payload unspecified).
#[inline]
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let abs = bits & 0x7FFF_FFFF;

    if abs >= 0x7F80_0000 {
        // Infinity propagates; NaN is quieted with a canonical payload.
        return if abs > 0x7F80_0000 { sign | 0x7E00 } else { sign | 0x7C00 };
    }

    let exp32 = (abs >> 23) as i32; // biased by 127
    let mant = abs & 0x007F_FFFF;

    if exp32 >= 113 {
        // Result is in the normal half range (biased-15 exponent >= 1).
        // Keep 10 mantissa bits; RNE on the 13 dropped bits. A mantissa
        // carry bumps the exponent, and exponent 31 is overflow to Inf --
        // this is what sends 65520.0 (a tie between 65504 and "65536") up.
        let exp16 = (exp32 - 112) as u32;
        let half = (exp16 << 10) | (mant >> 13);
        let dropped = mant & 0x1FFF;
        let round_up = dropped > 0x1000 || (dropped == 0x1000 && (half & 1) == 1);
        let half = half + round_up as u32;
        if half >= 0x7C00 {
            sign | 0x7C00
        } else {
            sign | half as u16
        }
    } else if exp32 >= 102 {
        // Result is subnormal (or rounds up to the smallest normal).
        // Value = sig * 2^(exp32-150); in units of 2^-24 that is sig >> s.
        let sig = 0x0080_0000 | mant;
        let s = 126 - exp32 as u32; // 14..=24
        let kept = sig >> s;
        let rem = sig & ((1u32 << s) - 1);
        let halfway = 1u32 << (s - 1);
        let round_up = rem > halfway || (rem == halfway && (kept & 1) == 1);
        // A carry out of the subnormal range lands on the smallest normal,
        // whose encoding (0x0400) follows contiguously.
        sign | (kept + round_up as u32) as u16
    } else {
        // Too small for the smallest subnormal: |x| <= 2^-25 rounds to zero
        // (the tie at exactly 2^-25 resolves to the even side, zero).
        sign
    }
}

/// Convert binary16 bits to the exactly-representable f32 value.
#[inline]
pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let mant = (h & 0x03FF) as u32;

    let bits = if exp == 0 {
        if mant == 0 {
            sign // signed zero
        } else {
            // Subnormal: normalize. msb position p in 0..=9 gives the value
            // 1.f * 2^(p-24), i.e. biased f32 exponent 103 + p.
            let p = 31 - mant.leading_zeros();
            let exp32 = 103 + p;
            let mant32 = (mant << (10 - p)) & 0x03FF;
            sign | (exp32 << 23) | (mant32 << 13)
        }
    } else if exp == 31 {
        // Infinity or NaN; the payload widens in place.
        sign | 0x7F80_0000 | (mant << 13)
    } else {
        sign | ((exp + 112) << 23) | (mant << 13)
    };
    f32::from_bits(bits)
}

/// Round an f32 through binary16 and back, i.e. the value a half-precision
/// store would retain. Sign, subnormals, overflow-to-Inf and NaN all behave
/// exactly as a `f32 -> f16 -> f32` round trip.
#[inline]
pub fn round_through_f16(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

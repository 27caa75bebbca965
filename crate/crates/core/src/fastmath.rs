//! Branch-free f32 transcendentals for the training hot path.
//!
//! `std` exp/ln/tanh are libm calls: accurate, but they block vectorization
//! and dominate the per-iteration cost of gate activations and the softmax.
//! These replacements are short polynomials over reduced arguments, accurate
//! to a few ulp, written without data-dependent branches so the loop
//! vectorizer can chew through whole activation slices. They are also pure
//! mul/add/compare sequences, so results are bit-identical on every host,
//! which keeps full training runs reproducible.
//!
//! Domains are the ones the trainer needs: `exp_f32` clamps to [-87, 88],
//! the log variants expect positive normal inputs. `log2_f32` is exact on
//! powers of two (the mantissa polynomial vanishes at 1.0), which the
//! uniform-prediction invariant of the evaluator relies on: a model emitting
//! flat logits over 256 symbols scores exactly 8 bits per character.

use std::f32::consts::SQRT_2;

const EXP_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23, rounds-to-nearest-even trick
const LOG2_E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_375; // exact in f32
const LN2_LO: f32 = -2.121_944_4e-4;

/// e^x with round-trip accuracy of a few ulp, clamped to [-87, 88].
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // n = round(x / ln 2) via the shift-by-magic trick (exact for |n| < 2^22).
    let nf = x * LOG2_E + EXP_MAGIC;
    let n = f32::to_bits(nf) as i32 - f32::to_bits(EXP_MAGIC) as i32;
    let nf = nf - EXP_MAGIC;
    // r = x - n*ln2 in extended precision; |r| <= (ln 2)/2.
    let r = x - nf * LN2_HI - nf * LN2_LO;
    // Degree-6 polynomial for e^r on the reduced interval (Cephes expf).
    let mut p = 1.987_569_1e-4;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_2e-1;
    let p = r * r * p + r + 1.0;
    // Scale by 2^n through the exponent field; n stays in [-126, 127]
    // because of the input clamp.
    let scale = f32::from_bits(((n + 127) as u32) << 23);
    p * scale
}

/// Mantissa/exponent split shared by the log variants: x = m * 2^e with
/// m in [sqrt(1/2), sqrt(2)). Caller guarantees x is positive and normal.
#[inline(always)]
fn log_reduce(x: f32) -> (f32, f32) {
    debug_assert!(x > 0.0 && x.is_finite(), "log domain: {x}");
    let bits = x.to_bits();
    let mut e = ((bits >> 23) as i32) - 127;
    let mut m = f32::from_bits((bits & 0x007F_FFFF) | 0x3F80_0000); // [1, 2)
    let fold = m > SQRT_2;
    e += fold as i32;
    m = if fold { 0.5 * m } else { m };
    (m - 1.0, e as f32)
}

/// ln(m+1) polynomial on [sqrt(1/2)-1, sqrt(2)-1] (Cephes logf). Exactly
/// zero at m = 0.
#[inline(always)]
fn ln_mantissa(f: f32) -> f32 {
    let z = f * f;
    let mut p = 7.037_683_6e-2;
    p = p * f - 1.151_461e-1;
    p = p * f + 1.167_699_9e-1;
    p = p * f - 1.242_014_1e-1;
    p = p * f + 1.424_932_3e-1;
    p = p * f - 1.666_805_7e-1;
    p = p * f + 2.000_071_5e-1;
    p = p * f - 2.499_999_4e-1;
    p = p * f + 3.333_333e-1;
    f * z * p - 0.5 * z + f
}

/// Natural log for positive normal x.
#[inline(always)]
pub fn ln_f32(x: f32) -> f32 {
    let (f, e) = log_reduce(x);
    let lnm = ln_mantissa(f);
    e * LN2_LO + lnm + e * LN2_HI
}

/// Base-2 log for positive normal x; exact when x is a power of two.
#[inline(always)]
pub fn log2_f32(x: f32) -> f32 {
    let (f, e) = log_reduce(x);
    ln_mantissa(f) * LOG2_E + e
}

/// tanh via exp of the negative doubled magnitude; saturates cleanly.
#[inline(always)]
pub fn tanh_f32(x: f32) -> f32 {
    let ax = x.abs().min(10.0);
    let z = exp_f32(-2.0 * ax);
    let t = (1.0 - z) / (1.0 + z);
    t.copysign(x)
}

/// Logistic sigmoid; exact 0.5 at 0, saturates to {0, 1} past +-30.
#[inline(always)]
pub fn sigmoid_f32(x: f32) -> f32 {
    let z = exp_f32(-x.clamp(-30.0, 30.0));
    1.0 / (1.0 + z)
}

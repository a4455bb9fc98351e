//! BF16 helpers: nearest rounding (via `half`) and stochastic rounding.

use half::bf16;

use super::rng::{rng_uniform, RngKey};

/// Round to the nearest BF16 (ties to even) and widen back to f32.
#[inline]
pub fn round_bf16(x: f32) -> f32 {
    bf16::from_f32(x).to_f32()
}

/// True when `x` has no bits below the BF16 mantissa.
#[inline]
pub fn is_bf16(x: f32) -> bool {
    x.to_bits() & 0xFFFF == 0
}

/// The two BF16 values bracketing `x`, ordered `lo <= x <= hi`.
pub fn bf16_neighbors(x: f32) -> (f32, f32) {
    let bits = x.to_bits();
    let toward_zero = f32::from_bits(bits & 0xFFFF_0000);
    if bits & 0xFFFF == 0 {
        return (x, x);
    }
    let away = f32::from_bits((bits & 0xFFFF_0000).wrapping_add(0x1_0000));
    if x.is_sign_negative() {
        (away, toward_zero)
    } else {
        (toward_zero, away)
    }
}

/// Stochastically round an f32 to BF16.
///
/// The 16 discarded bits are compared against 16 random bits: the value moves
/// away from zero with probability `discarded / 2^16`, which makes the result
/// unbiased. Exactly representable inputs are returned unchanged. Results
/// that would carry into the infinity exponent saturate at the largest finite
/// BF16.
pub fn stochastic_round_bf16(x: f32, key: RngKey) -> bf16 {
    let bits = x.to_bits();
    if bits & 0xFFFF == 0 || x.is_nan() {
        return bf16::from_bits((bits >> 16) as u16);
    }
    let noise = rng_uniform(key) & 0xFFFF;
    let mut out = (bits.wrapping_add(noise) >> 16) as u16;
    if out & 0x7F80 == 0x7F80 {
        out = (out & 0x8000) | 0x7F7F;
    }
    bf16::from_bits(out)
}

/// Stochastic rounding, widened back to f32.
#[inline]
pub fn sr_bf16(x: f32, key: RngKey) -> f32 {
    stochastic_round_bf16(x, key).to_f32()
}

//! Bit-level FP8 codecs.
//!
//! Two 8-bit layouts are supported:
//!
//! - **E4M3**: 1 sign, 4 exponent, 3 mantissa bits, bias 7. Saturating "fn"
//!   variant: no infinities, a single NaN pattern per sign (`S.1111.111`),
//!   largest finite magnitude 448.
//! - **E5M2**: 1 sign, 5 exponent, 2 mantissa bits, bias 15. IEEE-like: an
//!   all-ones exponent encodes infinity (mantissa 0) or NaN.
//!
//! Subnormals are kept in both formats. Encoding rounds to nearest, ties to
//! even, and saturates finite inputs above the largest finite value.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Which 8-bit floating-point layout a code uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum F8Kind {
    E4M3,
    E5M2,
}

impl F8Kind {
    pub const ALL: [F8Kind; 2] = [F8Kind::E4M3, F8Kind::E5M2];

    pub const fn exponent_bits(self) -> u32 {
        match self {
            F8Kind::E4M3 => 4,
            F8Kind::E5M2 => 5,
        }
    }

    pub const fn mantissa_bits(self) -> u32 {
        match self {
            F8Kind::E4M3 => 3,
            F8Kind::E5M2 => 2,
        }
    }

    pub const fn bias(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    /// Canonical NaN code (positive sign).
    pub const fn nan_code(self) -> u8 {
        0x7F
    }

    /// Largest finite magnitude, found by decoding every bit pattern.
    pub fn fmax(self) -> f32 {
        static CACHE: OnceLock<[f32; 2]> = OnceLock::new();
        let table = CACHE.get_or_init(|| {
            F8Kind::ALL.map(|kind| {
                (0..=255u8)
                    .map(|c| f8_decode(c, kind))
                    .filter(|v| v.is_finite())
                    .fold(0.0f32, |m, v| m.max(v.abs()))
            })
        });
        table[self as usize]
    }

    /// Smallest positive normal value, `2^(1 - bias)`.
    pub fn min_normal(self) -> f32 {
        (2.0f64).powi(1 - self.bias()) as f32
    }

    pub fn is_nan_code(self, code: u8) -> bool {
        f8_decode(code, self).is_nan()
    }

    pub fn name(self) -> &'static str {
        match self {
            F8Kind::E4M3 => "e4m3",
            F8Kind::E5M2 => "e5m2",
        }
    }
}

impl std::fmt::Display for F8Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for F8Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "e4m3" => Ok(F8Kind::E4M3),
            "e5m2" => Ok(F8Kind::E5M2),
            other => Err(format!("unknown fp8 kind `{other}` (expected e4m3 or e5m2)")),
        }
    }
}

/// Decode an 8-bit code to f32. Every FP8 value is exactly representable in f32.
pub fn f8_decode(code: u8, kind: F8Kind) -> f32 {
    let man_bits = kind.mantissa_bits();
    let exp_bits = kind.exponent_bits();
    let sign = if code & 0x80 != 0 { -1.0f32 } else { 1.0 };
    let exp = ((code >> man_bits) & ((1 << exp_bits) - 1) as u8) as i32;
    let man = (code & ((1 << man_bits) - 1) as u8) as u32;
    let exp_max = (1 << exp_bits) - 1;

    match kind {
        F8Kind::E4M3 if exp == exp_max && man == (1 << man_bits) - 1 => return f32::NAN,
        F8Kind::E5M2 if exp == exp_max => {
            return if man == 0 { sign * f32::INFINITY } else { f32::NAN };
        }
        _ => {}
    }

    let bias = kind.bias();
    let frac = man as f64 / (1u32 << man_bits) as f64;
    let mag = if exp == 0 {
        frac * 2f64.powi(1 - bias)
    } else {
        (1.0 + frac) * 2f64.powi(exp - bias)
    };
    sign * mag as f32
}

/// Exponent of the leading bit of a positive, normal f64.
fn ilog2(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Round `|x|` onto the format's grid (nearest, ties to even) without saturating.
///
/// The result may exceed `fmax`; callers decide whether to saturate.
fn round_to_grid(mag: f64, kind: F8Kind) -> f64 {
    if mag == 0.0 {
        return 0.0;
    }
    let man_bits = kind.mantissa_bits() as i32;
    let emin = 1 - kind.bias();
    let e = ilog2(mag).max(emin);
    let quantum = 2f64.powi(e - man_bits);
    (mag / quantum).round_ties_even() * quantum
}

/// Encode an f32 to the nearest FP8 code (round to nearest even).
///
/// NaN maps to the NaN code. Finite magnitudes beyond `fmax` saturate to
/// `±fmax`. Infinite inputs become infinity for E5M2 and saturate for E4M3.
pub fn f8_encode(x: f32, kind: F8Kind) -> u8 {
    if x.is_nan() {
        return kind.nan_code();
    }
    let sign_bit = if x.is_sign_negative() { 0x80u8 } else { 0 };
    if x.is_infinite() && kind == F8Kind::E5M2 {
        return sign_bit | 0x7C;
    }

    let fmax = kind.fmax() as f64;
    let mag = (x as f64).abs();
    let rounded = if mag.is_infinite() {
        fmax
    } else {
        round_to_grid(mag, kind).min(fmax)
    };
    sign_bit | magnitude_code(rounded, kind)
}

/// Bit pattern (without sign) of a magnitude that is exactly on the grid.
fn magnitude_code(value: f64, kind: F8Kind) -> u8 {
    if value == 0.0 {
        return 0;
    }
    let man_bits = kind.mantissa_bits() as i32;
    let bias = kind.bias();
    let emin = 1 - bias;
    let e = ilog2(value);
    if e < emin {
        let m = value / 2f64.powi(emin - man_bits);
        m as u8
    } else {
        let m = value / 2f64.powi(e - man_bits) - (1 << man_bits) as f64;
        (((e + bias) as u8) << man_bits) | m as u8
    }
}

//! Tensor-level absmax scaling into FP8.

use serde::{Deserialize, Serialize};

use super::fp8::{f8_decode, f8_encode, F8Kind};
use super::NumericsError;

/// Low-precision codes plus the single scale that produced them.
///
/// `codes[i] = encode(x[i] * scale)`, so `x[i] ≈ decode(codes[i]) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledQuant {
    pub codes: Vec<u8>,
    pub shape: Vec<usize>,
    pub kind: F8Kind,
    pub scale: f32,
    pub source_absmax: f32,
}

impl ScaledQuant {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Decoded (still scaled) value of element `i`.
    #[inline]
    pub fn decoded(&self, i: usize) -> f32 {
        f8_decode(self.codes[i], self.kind)
    }

    /// Storage footprint: one byte per code plus the f32 scale.
    pub fn nbytes(&self) -> usize {
        self.codes.len() + std::mem::size_of::<f32>()
    }
}

/// Largest magnitude in `t`. Order independent; a NaN anywhere is an error.
pub fn absmax(t: &[f32]) -> Result<f32, NumericsError> {
    let mut m = 0.0f32;
    for (index, &x) in t.iter().enumerate() {
        if x.is_nan() {
            return Err(NumericsError::NanInTensor { index });
        }
        m = m.max(x.abs());
    }
    Ok(m)
}

/// Scale mapping `absmax` onto the format's largest finite value.
/// A zero (or empty) tensor gets scale 1.
pub fn absmax_scale(absmax: f32, kind: F8Kind) -> f32 {
    if absmax > 0.0 {
        kind.fmax() / absmax
    } else {
        1.0
    }
}

/// Quantize with a just-in-time absmax.
pub fn quantize_absmax(t: &[f32], shape: &[usize], kind: F8Kind) -> Result<ScaledQuant, NumericsError> {
    let amax = absmax(t)?;
    Ok(quantize_with_absmax(t, shape, kind, amax))
}

/// Quantize with a previously recorded absmax (no reduction pass).
///
/// The caller guarantees `absmax` is the true absmax of `t`; this is how
/// recomputation reuses the statistics captured during the forward pass.
pub fn quantize_with_absmax(t: &[f32], shape: &[usize], kind: F8Kind, absmax: f32) -> ScaledQuant {
    debug_assert_eq!(t.len(), shape.iter().product::<usize>());
    let scale = absmax_scale(absmax, kind);
    let codes = t.iter().map(|&x| f8_encode(x * scale, kind)).collect();
    ScaledQuant {
        codes,
        shape: shape.to_vec(),
        kind,
        scale,
        source_absmax: absmax,
    }
}

/// `element_i = decode(codes_i) / scale`.
pub fn dequantize(q: &ScaledQuant) -> Vec<f32> {
    q.codes
        .iter()
        .map(|&c| f8_decode(c, q.kind) / q.scale)
        .collect()
}

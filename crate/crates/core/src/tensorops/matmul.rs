//! TN matrix multiply: `out[i, j] = sum_k a[i, k] * b[j, k]`.
//!
//! Both operands keep the reduction dimension innermost, the only layout the
//! FP8 tensor-core path accepts. Backward passes therefore transpose
//! explicitly, see [`transpose_quantize`].

use rayon::prelude::*;

use super::{Tensor, TensorError};
use crate::numerics::{absmax, f8_decode, quantize_with_absmax, F8Kind, ScaledQuant};

/// A matmul operand: dense values (already rounded to their storage type) or
/// FP8 codes with one tensor-level scale.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Dense(&'a Tensor),
    Fp8(&'a ScaledQuant),
}

impl Operand<'_> {
    fn dims(&self) -> Result<(usize, usize), TensorError> {
        let shape = match self {
            Operand::Dense(t) => &t.shape,
            Operand::Fp8(q) => &q.shape,
        };
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix { op: "matmul_tn", shape: shape.clone() }),
        }
    }
}

fn decode_table(kind: F8Kind) -> [f32; 256] {
    std::array::from_fn(|c| f8_decode(c as u8, kind))
}

fn decode_all(q: &ScaledQuant) -> Vec<f32> {
    let table = decode_table(q.kind);
    q.codes.iter().map(|&c| table[c as usize]).collect()
}

/// Sequential-k inner products, parallel over output rows.
fn gemm_tn(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let body = |(i, row): (usize, &mut [f32])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for t in 0..k {
                acc += ar[t] * br[t];
            }
            *o = acc;
        }
    };
    if m * n * k >= 1 << 16 {
        out.par_chunks_mut(n.max(1)).enumerate().for_each(body);
    } else {
        out.chunks_mut(n.max(1)).enumerate().for_each(body);
    }
    out
}

/// `a: [M, K]`, `b: [N, K]` → `[M, N]`, accumulated in f32.
///
/// For FP8 operands the products of decoded codes are accumulated first and
/// the two scales are divided out once per output element:
/// `out = acc / (scale_a * scale_b)`.
pub fn matmul_tn(a: Operand<'_>, b: Operand<'_>) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims()?;
    let (n, kb) = b.dims()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            expected: vec![n, ka],
            got: vec![n, kb],
        });
    }
    let data = match (a, b) {
        (Operand::Dense(x), Operand::Dense(y)) => gemm_tn(&x.data, &y.data, m, n, ka),
        (Operand::Fp8(x), Operand::Fp8(y)) => {
            let combined = x.scale * y.scale;
            let mut acc = gemm_tn(&decode_all(x), &decode_all(y), m, n, ka);
            for v in &mut acc {
                *v /= combined;
            }
            acc
        }
        _ => return Err(TensorError::MixedOperands),
    };
    Ok(Tensor { shape: vec![m, n], data })
}

/// Quantize a 2-D tensor and lay the codes out transposed.
///
/// Scale and codes are identical to quantizing first and transposing the
/// code matrix afterwards.
pub fn transpose_quantize(t: &Tensor, kind: F8Kind) -> Result<ScaledQuant, TensorError> {
    let amax = absmax(&t.data)?;
    transpose_quantize_with_absmax(t, kind, amax)
}

/// Transpose-quantize using a recorded absmax.
pub fn transpose_quantize_with_absmax(
    t: &Tensor,
    kind: F8Kind,
    absmax: f32,
) -> Result<ScaledQuant, TensorError> {
    let (r, c) = t.matrix_dims("transpose_quantize")?;
    let q = quantize_with_absmax(&t.data, &t.shape, kind, absmax);
    let mut codes = vec![0u8; r * c];
    for i in 0..r {
        for j in 0..c {
            codes[j * r + i] = q.codes[i * c + j];
        }
    }
    Ok(ScaledQuant { codes, shape: vec![c, r], ..q })
}

/// Transpose the code matrix of an already quantized 2-D tensor.
pub fn transpose_codes(q: &ScaledQuant) -> Result<ScaledQuant, TensorError> {
    let (r, c) = match q.shape.as_slice() {
        [r, c] => (*r, *c),
        _ => return Err(TensorError::NotMatrix { op: "transpose_codes", shape: q.shape.clone() }),
    };
    let mut codes = vec![0u8; r * c];
    for i in 0..r {
        for j in 0..c {
            codes[j * r + i] = q.codes[i * c + j];
        }
    }
    Ok(ScaledQuant { codes, shape: vec![c, r], ..q.clone() })
}

//! SwiGLU: `silu(gate) * up` over the two halves of the last dimension.

use super::{FusedOut, Storage, Tensor, TensorError};
use crate::numerics::{f8_encode, absmax_scale, F8Kind, ScaledQuant};

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn halves(gate_up: &Tensor) -> Result<usize, TensorError> {
    let c = gate_up.cols();
    if c % 2 != 0 {
        return Err(TensorError::OddLastDim(c));
    }
    Ok(c / 2)
}

fn out_shape(gate_up: &Tensor, h: usize) -> Vec<usize> {
    let mut shape = gate_up.shape.clone();
    *shape.last_mut().unwrap() = h;
    shape
}

#[inline]
fn swiglu_row(gu: &[f32], h: usize, out: &mut [f32], store: Storage) {
    for j in 0..h {
        out[j] = store.store(silu(gu[j]) * gu[h + j]);
    }
}

/// `[.., 2H] -> [.., H]` with the output absmax.
pub fn swiglu_fused(gate_up: &Tensor, store: Storage) -> Result<FusedOut, TensorError> {
    let h = halves(gate_up)?;
    let mut out = Tensor::zeros(&out_shape(gate_up, h));
    for i in 0..gate_up.rows() {
        swiglu_row(gate_up.row(i), h, &mut out.data[i * h..(i + 1) * h], store);
    }
    FusedOut::new(out)
}

/// SwiGLU with the quantization folded in, using a known absmax.
///
/// Used during recomputation, when the absmax recorded in the forward pass
/// makes a separate reduction unnecessary. Codes equal
/// `quantize_with_absmax(swiglu_fused(..).value, kind, absmax)`.
pub fn swiglu_fused_quant(
    gate_up: &Tensor,
    store: Storage,
    kind: F8Kind,
    absmax: f32,
) -> Result<ScaledQuant, TensorError> {
    let h = halves(gate_up)?;
    let scale = absmax_scale(absmax, kind);
    let mut row = vec![0.0f32; h];
    let mut codes = Vec::with_capacity(gate_up.rows() * h);
    for i in 0..gate_up.rows() {
        swiglu_row(gate_up.row(i), h, &mut row, store);
        codes.extend(row.iter().map(|&v| f8_encode(v * scale, kind)));
    }
    Ok(ScaledQuant {
        codes,
        shape: out_shape(gate_up, h),
        kind,
        scale,
        source_absmax: absmax,
    })
}

/// Gradient with respect to the concatenated `[gate | up]` input.
pub fn swiglu_backward(gate_up: &Tensor, d_out: &Tensor) -> Result<Tensor, TensorError> {
    let h = halves(gate_up)?;
    let expected = out_shape(gate_up, h);
    if d_out.shape != expected {
        return Err(TensorError::ShapeMismatch {
            op: "swiglu_backward",
            expected,
            got: d_out.shape.clone(),
        });
    }
    let mut d = Tensor::zeros(&gate_up.shape);
    for i in 0..gate_up.rows() {
        let gu = gate_up.row(i);
        let dy = d_out.row(i);
        let dr = &mut d.data[i * 2 * h..(i + 1) * 2 * h];
        for j in 0..h {
            let g = gu[j];
            let s = sigmoid(g);
            dr[j] = dy[j] * gu[h + j] * s * (1.0 + g * (1.0 - s));
            dr[h + j] = dy[j] * g * s;
        }
    }
    Ok(d)
}

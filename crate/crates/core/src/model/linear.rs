//! Block projections `y = x W^T` in the configured precision.

use super::{BlockPrecision, PrecisionMap};
use crate::numerics::{quantize_absmax, quantize_with_absmax, F8Kind, ScaledQuant};
use crate::tensorops::{
    matmul_tn, transpose_codes, transpose_quantize, transpose_quantize_with_absmax, Operand, Tensor,
    TensorError,
};

/// Input of a projection as needed for its weight gradient.
pub(crate) enum SavedInput<'a> {
    /// Stored activation and the absmax recorded when it was produced.
    Dense(&'a Tensor, f32),
    /// Activation that was recomputed straight into FP8 codes.
    Quant(ScaledQuant),
}

/// Forward projection. In FP8 mode the activation is quantized with the
/// supplied absmax and the weight with its own just-in-time absmax.
pub(crate) fn forward(x: &Tensor, x_absmax: f32, w: &Tensor, prec: &PrecisionMap) -> Result<Tensor, TensorError> {
    let out = match prec.block_matmuls {
        BlockPrecision::Fp8E4m3 => {
            let qx = quantize_with_absmax(&x.data, &x.shape, F8Kind::E4M3, x_absmax);
            let qw = quantize_absmax(&w.data, &w.shape, F8Kind::E4M3)?;
            matmul_tn(Operand::Fp8(&qx), Operand::Fp8(&qw))?
        }
        _ => matmul_tn(Operand::Dense(x), Operand::Dense(w))?,
    };
    Ok(out.stored(prec.storage()))
}

/// Forward projection from an already quantized input.

/// Returns `(dx, dW)`; `dx` is stored, `dW` is left in f32 for the
/// accumulator to round.
pub(crate) fn backward(
    dy: &Tensor,
    x: SavedInput<'_>,
    w: &Tensor,
    prec: &PrecisionMap,
) -> Result<(Tensor, Tensor), TensorError> {
    match prec.block_matmuls {
        BlockPrecision::Fp8E4m3 => {
            let kind = prec.backward_grads;
            let qdy = quantize_absmax(&dy.data, &dy.shape, kind)?;
            let qwt = transpose_quantize(w, F8Kind::E4M3)?;
            let dx = matmul_tn(Operand::Fp8(&qdy), Operand::Fp8(&qwt))?.stored(prec.storage());
            let qdyt = transpose_quantize(dy, kind)?;
            let qxt = match x {
                SavedInput::Dense(t, amax) => transpose_quantize_with_absmax(t, F8Kind::E4M3, amax)?,
                SavedInput::Quant(q) => transpose_codes(&q)?,
            };
            let dw = matmul_tn(Operand::Fp8(&qdyt), Operand::Fp8(&qxt))?;
            Ok((dx, dw))
        }
        _ => {
            let x = match x {
                SavedInput::Dense(t, _) => t,
                SavedInput::Quant(_) => return Err(TensorError::MixedOperands),
            };
            let wt = w.transpose()?;
            let dx = matmul_tn(Operand::Dense(dy), Operand::Dense(&wt))?.stored(prec.storage());
            let dw = matmul_tn(Operand::Dense(&dy.transpose()?), Operand::Dense(&x.transpose()?))?;
            Ok((dx, dw))
        }
    }
}

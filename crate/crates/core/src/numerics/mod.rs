//! Scalar low-precision formats and tensor-level scaling.

mod bf16;
mod fp8;
mod quant;
mod rng;

pub use self::bf16::{bf16_neighbors, is_bf16, round_bf16, sr_bf16, stochastic_round_bf16};
pub use fp8::{f8_decode, f8_encode, F8Kind};
pub use quant::{absmax, absmax_scale, dequantize, quantize_absmax, quantize_with_absmax, ScaledQuant};
pub use rng::{philox4x32, rng_block, rng_normal, rng_uniform, rng_unit_f32, stream_id, RngKey};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("NaN at element {index}")]
    NanInTensor { index: usize },
}

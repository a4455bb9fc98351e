//! Deterministic dense primitives.
//!
//! Every reduction in this module runs in ascending index order on a single
//! thread; parallelism is only used across independent output rows, so each
//! op is bitwise reproducible regardless of thread count.

mod attention;
mod cross_entropy;
mod embedding;
mod matmul;
mod norm;
mod reduce;
mod swiglu;
mod tensor;

pub use attention::{sdpa_backward_chunked, sdpa_chunked, AttnDims, AttnGrads, AttnOut};
pub use cross_entropy::{fused_cross_entropy_chunked, CrossEntropyOut};
pub use embedding::{embedding_backward_sorted, embedding_forward};
pub use matmul::{matmul_tn, transpose_codes, transpose_quantize, transpose_quantize_with_absmax, Operand};
pub use norm::{rmsnorm, rmsnorm_backward, rmsnorm_residual_fused, residual_add, NormOut, DEFAULT_RMS_EPS};
pub use reduce::{column_sum_two_phase, deterministic_reduce};
pub use swiglu::{silu, swiglu_backward, swiglu_fused, swiglu_fused_quant};
pub use tensor::{FusedOut, Storage, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("swiglu: last dimension {0} is odd")]
    OddLastDim(usize),
    #[error("matmul: cannot mix FP8 and dense operands")]
    MixedOperands,
    #[error("deterministic_reduce: no partials")]
    EmptyPartials,
    #[error("id {id} at position {position} is out of range for vocab {vocab}")]
    IdOutOfRange { id: u32, position: usize, vocab: usize },
    #[error("{0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

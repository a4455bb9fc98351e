//! AdamW with BF16 master weights, optional BF16 moments written with
//! stochastic rounding, a deterministic global gradient norm, and ZeRO-1
//! style sharded stepping.

mod adamw;
mod norm;
mod shard;

pub use adamw::{AdamWConfig, MasterPrecision, MomentPrecision, OptimState, ParamState};
pub use norm::{clip_coefficient, global_grad_norm, global_grad_norm_sharded};
pub use shard::{shard_range, GradInput, ShardedOptimizer};

use crate::comms::CommsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("{param}: expected {expected} elements, got {got}")]
    ShapeMismatch { param: String, expected: usize, got: usize },
    #[error("expected {expected} gradient tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
    #[error("shard misaligned: {0}")]
    ShardMisaligned(String),
    #[error("optimizer state is missing {0}")]
    MissingState(String),
    #[error(transparent)]
    Comms(#[from] CommsError),
}

//! Decoder-only transformer wired through the FP8/BF16 precision map.
//!
//! Block layout (pre-norm, residual stream `h`):
//!
//! ```text
//! a  = rmsnorm(h) * g1          (fused with the previous residual add)
//! q, k, v = rope(a Wqkv^T)
//! h' = h + sdpa(q, k, v) Wo^T
//! b  = rmsnorm(h') * g2         (fused with the add above)
//! h  = h' + swiglu(b Wgu^T) Wd^T
//! ```
//!
//! followed by a final norm and the chunked cross-entropy LM head.

mod backward;
mod checkpoint;
mod config;
mod corpus;
mod forward;
mod linear;
mod params;
mod precision;
mod rope;
mod schedule;

pub use backward::backward;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Manifest, TensorEntry, MAGIC};
pub use config::ModelConfig;
pub use corpus::{CorpusSpec, SyntheticCorpus};
pub use forward::{forward, Batch, ForwardStats, LayerSaved, LayerStats, RunOptions, Saved};
pub use params::{is_block_param, AccumCtx, LayerParams, Params};
pub use precision::{BlockPrecision, GradAccum, PrecisionMap, RecomputeSet, Site};
pub use rope::{RopeTable, ROPE_BASE};
pub use schedule::{schedule_lmhead_backward, LmHeadOp, LmHeadPlan, ScheduleEvent, Stream};

use crate::tensorops::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite value at {site} (element {index})")]
    NonFinite { site: String, index: usize },
    #[error("layer {layer}: '{name}' was not saved and is not recomputed by this recompute set")]
    MissingSaved { layer: usize, name: &'static str },
    #[error("backward options differ from the forward pass")]
    OptionsMismatch,
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Forward plus backward for one micro-batch; returns the loss.
pub fn forward_backward(
    cfg: &ModelConfig,
    params: &Params,
    batch: &Batch,
    opts: &RunOptions,
    grads: &mut Params,
    accum: AccumCtx,
    grad_scale: f32,
) -> Result<f32, ModelError> {
    let (loss, saved) = forward(cfg, params, batch, opts)?;
    backward(cfg, params, &saved, opts, grads, accum, grad_scale)?;
    Ok(loss)
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::PlanError;
use crate::model::{PrecisionMap, RecomputeSet};
use crate::offload::{OffloadSet, Tensors, TransferPolicy};
use crate::optim::MomentPrecision;

/// One training configuration for a given model and worker count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPlan {
    pub micro_batch: usize,
    pub ga_steps: usize,
    pub recompute: RecomputeSet,
    pub offload: OffloadSet,
    pub shard_weights: bool,
    pub shard_grads: bool,
    pub precision: PrecisionMap,
    pub moments: MomentPrecision,
    /// Chunked LM head / loss and chunked attention workspaces.
    pub chunking: bool,
    pub transfer_policy: TransferPolicy,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            micro_batch: 1,
            ga_steps: 1,
            recompute: RecomputeSet::NONE,
            offload: OffloadSet::NONE,
            shard_weights: false,
            shard_grads: false,
            precision: PrecisionMap::FP8,
            moments: MomentPrecision::Bf16,
            chunking: true,
            transfer_policy: TransferPolicy::DoubleBuffer,
        }
    }
}

impl RunPlan {
    /// Errors for contradictory plans; warnings for legal but unadvised ones.
    pub fn validate(&self, workers: usize) -> Result<Vec<String>, PlanError> {
        if self.micro_batch == 0 || self.ga_steps == 0 {
            return Err(PlanError::InvalidPlan("micro_batch and ga_steps must be positive".into()));
        }
        if workers == 0 {
            return Err(PlanError::InvalidPlan("need at least one worker".into()));
        }
        if self.offload.contains(Tensors::Master) && !self.precision.is_fp8() {
            return Err(PlanError::InvalidPlan(
                "theta* exists only next to FP8 weights; with BF16 weights offload theta".into(),
            ));
        }
        let mut warnings = Vec::new();
        if workers == 1 && (self.shard_weights || self.shard_grads) {
            warnings.push("sharding has no effect with a single worker".to_string());
        }
        if workers > 1 && self.shard_grads && !self.shard_weights {
            warnings.push("sharded gradients without sharded weights: weight sharding with host caching moves fewer bytes".into());
        }
        Ok(warnings)
    }

    /// Key used to break ties between equally fast plans.
    pub fn sort_key(&self) -> impl Ord {
        (
            self.micro_batch,
            self.recompute,
            self.offload,
            self.shard_weights,
            self.shard_grads,
            self.transfer_policy,
            self.chunking,
        )
    }
}

impl fmt::Display for RunPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} mb={} ga={} recompute={} offload={}",
            self.precision, self.micro_batch, self.ga_steps, self.recompute, self.offload
        )?;
        if self.shard_weights {
            f.write_str(" shard-w")?;
        }
        if self.shard_grads {
            f.write_str(" shard-g")?;
        }
        Ok(())
    }
}

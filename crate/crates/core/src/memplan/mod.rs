//! Analytical planner: memory per tier, FLOPs per precision, step-time and
//! utilisation estimates, and the search over run configurations.

mod fixtures;
mod flops;
mod memory;
mod plan;
mod profile;
mod search;
mod time;

pub use fixtures::{
    params_1_5b, params_7b_blocks, qwen25, PublishedRun, BENCH_SEQ_LEN, HOST_BUDGET_RESIDUAL_TOKENS, PUBLISHED_RUNS,
    QWEN_SIZES,
};
pub use flops::{flop_breakdown, fp8_speedup_ceiling, lower_bound_seconds_per_token, mfu, FlopBreakdown};
pub use memory::{
    memory_breakdown, Categories, LayerSizes, MemoryBreakdown, Phase, CE_CHUNK_TOKENS,
    RESERVED_DEVICE_BYTES,
};
pub use plan::RunPlan;
pub use profile::HardwareProfile;
pub use search::{search_plan, PlanReport, RankedPlan, SearchMode, SearchOptions, MICRO_BATCHES};
pub use time::{estimate_step_time, TimeBreakdown};

/// Decimal gigabyte.
pub const GB: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("unknown hardware profile '{name}'; available: {available}")]
    UnknownProfile { name: String, available: String },
    #[error("invalid hardware profile: {0}")]
    Profile(String),
    #[error("precision '{0}' has no peak rate in the hardware profile")]
    UnknownPrecision(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("measured throughput must be positive")]
    NonPositiveThroughput,
}

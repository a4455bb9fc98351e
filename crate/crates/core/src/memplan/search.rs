use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{estimate_step_time, memory_breakdown, HardwareProfile, MemoryBreakdown, PlanError, RunPlan, TimeBreakdown};
use crate::model::{ModelConfig, PrecisionMap, RecomputeSet};
use crate::offload::{OffloadSet, Tensors, TransferPolicy};
use crate::optim::MomentPrecision;

pub const MICRO_BATCHES: [usize; 14] = [1, 2, 3, 4, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Skips plans dominated by a fitting plan with the same micro-batch and
    /// sharding whose recompute and offload sets are both subsets: such a
    /// plan has no less work and no fewer transfers.
    Pruned,
    /// Every combination on the grid.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub mode: SearchMode,
    pub precision: PrecisionMap,
    pub moments: MomentPrecision,
    pub chunking: bool,
    /// Tokens per optimizer step across all workers.
    pub target_batch_tokens: u64,
    pub micro_batches: Vec<usize>,
    /// Defaults to the faster policy of the profile.
    pub transfer_policy: Option<TransferPolicy>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            mode: SearchMode::Pruned,
            precision: PrecisionMap::FP8,
            moments: MomentPrecision::Bf16,
            chunking: true,
            target_batch_tokens: 500_000,
            micro_batches: MICRO_BATCHES.to_vec(),
            transfer_policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPlan {
    pub plan: RunPlan,
    pub memory: MemoryBreakdown,
    pub time: TimeBreakdown,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// Feasible plans, fastest first.
    pub feasible: Vec<RankedPlan>,
    pub evaluated: usize,
    /// When nothing fits: what the most frugal plan on the grid runs out of.
    pub binding_constraint: Option<String>,
}

fn ga_steps(target: u64, workers: usize, micro_batch: usize, seq: usize) -> usize {
    let per = (workers * micro_batch * seq).max(1) as u64;
    target.div_ceil(per).max(1) as usize
}

pub(crate) fn fits(mem: &MemoryBreakdown, hw: &HardwareProfile) -> bool {
    mem.binding_constraint(hw.device_bytes, hw.host_bytes).is_none()
}

pub fn search_plan(
    cfg: &ModelConfig,
    hw: &HardwareProfile,
    workers: usize,
    opts: &SearchOptions,
) -> Result<PlanReport, PlanError> {
    let fp8 = opts.precision.is_fp8();
    let mut offloads: Vec<OffloadSet> = OffloadSet::subsets().filter(|s| fp8 || !s.contains(Tensors::Master)).collect();
    offloads.sort_by_key(|s| (s.items().len(), s.bits()));
    let shards: Vec<(bool, bool)> = if workers > 1 {
        vec![(false, false), (true, false), (false, true), (true, true)]
    } else {
        vec![(false, false)]
    };
    let policy = opts.transfer_policy.unwrap_or_else(|| hw.preferred_policy());
    let mut micro = opts.micro_batches.clone();
    micro.sort_unstable();
    micro.dedup();
    let levels = RecomputeSet::levels();

    let mut cells = Vec::new();
    for &(shard_weights, shard_grads) in &shards {
        for &mb in &micro {
            cells.push((shard_weights, shard_grads, mb));
        }
    }
    let results: Vec<(usize, Vec<RankedPlan>)> = cells
        .par_iter()
        .map(|&(shard_weights, shard_grads, mb)| -> Result<(usize, Vec<RankedPlan>), PlanError> {
            let mut evaluated = 0;
            let mut fitting: Vec<(RecomputeSet, OffloadSet)> = Vec::new();
            let mut out = Vec::new();
            for &recompute in &levels {
                for &offload in &offloads {
                    // a plan that fits with subsets of both is at least as fast
                    if opts.mode == SearchMode::Pruned
                        && fitting.iter().any(|(r, o)| r.is_subset_of(&recompute) && o.is_subset_of(&offload))
                    {
                        continue;
                    }
                    let plan = RunPlan {
                        micro_batch: mb,
                        ga_steps: ga_steps(opts.target_batch_tokens, workers, mb, cfg.seq_len),
                        recompute,
                        offload,
                        shard_weights,
                        shard_grads,
                        precision: opts.precision,
                        moments: opts.moments,
                        chunking: opts.chunking,
                        transfer_policy: policy,
                    };
                    evaluated += 1;
                    let memory = memory_breakdown(cfg, &plan, workers);
                    if !fits(&memory, hw) {
                        continue;
                    }
                    fitting.push((recompute, offload));
                    let time = estimate_step_time(cfg, &plan, hw, workers)?;
                    if time.infeasible_in_time {
                        continue;
                    }
                    let warnings = plan.validate(workers)?;
                    out.push(RankedPlan { plan, memory, time, warnings });
                }
            }
            Ok((evaluated, out))
        })
        .collect::<Result<_, _>>()?;

    let evaluated = results.iter().map(|r| r.0).sum();
    let mut feasible: Vec<RankedPlan> = results.into_iter().flat_map(|r| r.1).collect();
    feasible.sort_by(|a, b| {
        b.time
            .tokens_per_second
            .total_cmp(&a.time.tokens_per_second)
            .then_with(|| a.plan.sort_key().cmp(&b.plan.sort_key()))
    });
    let binding_constraint = if feasible.is_empty() {
        let frugal = RunPlan {
            micro_batch: micro.first().copied().unwrap_or(1),
            recompute: RecomputeSet::levels().last().copied().unwrap_or_default(),
            offload: if fp8 { OffloadSet::all() } else { OffloadSet::all().without(Tensors::Master) },
            shard_weights: workers > 1,
            shard_grads: workers > 1,
            precision: opts.precision,
            moments: opts.moments,
            chunking: opts.chunking,
            transfer_policy: policy,
            ga_steps: 1,
        };
        let mem = memory_breakdown(cfg, &frugal, workers);
        Some(
            mem.binding_constraint(hw.device_bytes, hw.host_bytes)
                .map(|c| {
                    format!(
                        "{c}: smallest plan needs {:.2} GB device / {:.2} GB host, profile has {:.2} / {:.2}",
                        mem.device_total() as f64 / 1e9,
                        mem.host_total() as f64 / 1e9,
                        hw.device_bytes as f64 / 1e9,
                        hw.host_bytes as f64 / 1e9
                    )
                })
                .unwrap_or_else(|| "transfer time: no link bandwidth for the required offload".into()),
        )
    } else {
        None
    };
    Ok(PlanReport { feasible, evaluated, binding_constraint })
}

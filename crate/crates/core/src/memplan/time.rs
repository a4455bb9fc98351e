use serde::{Deserialize, Serialize};

use super::{flop_breakdown, HardwareProfile, LayerSizes, PlanError, RunPlan};
use crate::model::ModelConfig;
use crate::offload::{transfer_time, Tensors};

/// Seconds per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub compute: f64,
    /// All host-link traffic, hidden or not.
    pub transfer: f64,
    /// Transfer time not covered by compute.
    pub exposed_transfer: f64,
    pub optimizer: f64,
    pub total: f64,
    pub tokens: u64,
    pub tokens_per_second: f64,
    /// Transfers can never finish (no link bandwidth).
    pub infeasible_in_time: bool,
}

impl TimeBreakdown {
    pub fn exposed_fraction(&self) -> f64 {
        if self.total.is_finite() && self.total > 0.0 {
            self.exposed_transfer / self.total
        } else {
            1.0
        }
    }
}

/// Per-layer pipeline model: while layer `l` computes, the transfers for
/// layer `l + 1` run on the copy engines. Only the first layer's transfers
/// and the per-layer excess of transfer over compute are exposed, so the
/// step time never decreases when offload or recompute sets grow.
pub fn estimate_step_time(
    cfg: &ModelConfig,
    plan: &RunPlan,
    hw: &HardwareProfile,
    workers: usize,
) -> Result<TimeBreakdown, PlanError> {
    plan.validate(workers)?;
    let w = workers as f64;
    let s = LayerSizes::new(cfg, plan);
    let tokens = s.tokens as f64;
    let l = cfg.n_layers as f64;
    let budget = hw.budget(plan.transfer_policy);
    let topo = hw.topology();
    let xfer = |bytes: f64| -> f64 {
        if bytes <= 0.0 {
            0.0
        } else if hw.link_bandwidth <= 0.0 {
            f64::INFINITY
        } else {
            transfer_time(bytes as u64, &budget, &topo)
        }
    };

    let flops = flop_breakdown(cfg, &plan.precision).with_recompute(cfg, plan.recompute);
    let rate = |p: &str| -> Result<f64, PlanError> { Ok(hw.peak(p)? * hw.attainable_fraction) };
    let mut block = flops;
    block.bf16_lmhead = 0.0;
    let mut layer_compute = 0.0;
    if cfg.n_layers > 0 {
        for (p, ops) in block.by_precision() {
            layer_compute += tokens * ops / l / rate(p)?;
        }
    }
    let head_peak = if plan.precision.storage().bytes_per_elem() == 4 { "f32" } else { "bf16" };
    let head_time = tokens * flops.bf16_lmhead / rate(head_peak)?;
    // elementwise passes over the layer's activations
    layer_compute += 3.0 * s.working as f64 / hw.mem_bandwidth;

    let traversals = topo.link_traversals() as f64;
    let off = |t| plan.offload.contains(t);
    let shard_w = plan.shard_weights && workers > 1;
    let shard_g = plan.shard_grads && workers > 1;
    let ga = plan.ga_steps as f64;

    let mut per_layer = Vec::new();
    if off(Tensors::Theta) || shard_w {
        // forward fetch, and the backward refetch
        per_layer.push(s.weights as f64);
        per_layer.push(s.weights as f64);
    }
    if off(Tensors::X) {
        per_layer.push(s.residual as f64);
        per_layer.push(s.residual as f64);
    }
    if off(Tensors::G) {
        per_layer.push(s.grads as f64);
        if plan.ga_steps > 1 {
            per_layer.push(s.grads as f64 * (ga - 1.0) / ga);
        }
    }
    if shard_g {
        per_layer.push((w - 1.0) / w * s.grads as f64 * traversals);
    }
    let layer_transfer: f64 = per_layer.iter().map(|&b| xfer(b)).sum();
    // pipeline fill: the first layer's transfers have nothing to hide behind
    let first = layer_transfer;
    let exposed_layer = (layer_transfer - layer_compute).max(0.0);
    let micro_compute = l * layer_compute + head_time;
    let micro_exposed = if layer_transfer.is_finite() { first + l * exposed_layer } else { f64::INFINITY };

    // optimizer: offloaded state streams in and out once per step
    let mut opt_bytes = 0.0;
    for t in [Tensors::M, Tensors::V] {
        if off(t) {
            opt_bytes += 2.0 * l * s.moment as f64 / w;
        }
    }
    if off(Tensors::Master) {
        opt_bytes += 2.0 * l * s.master as f64 / w;
    }
    if off(Tensors::Theta) {
        // BF16 weights are read and written; FP8 weights are requantized
        // from the master and only written
        let passes = if plan.precision.is_fp8() { 1.0 } else { 2.0 };
        opt_bytes += passes * l * s.weights as f64 / w;
    }
    let params = cfg.param_count() as f64;
    let state_bytes = 2.0 * (s.moment_bytes as f64 * 2.0 + 2.0 + s.grad_bytes as f64);
    let mut optimizer = params / w * state_bytes / hw.mem_bandwidth + xfer(opt_bytes);
    let mut collective = 0.0;
    if workers > 1 {
        if !shard_g {
            // reduce-scatter of the accumulated gradients
            collective += xfer((w - 1.0) / w * l * s.grads as f64 * traversals);
        }
        // refresh of updated weights
        let gather = if shard_w { l * s.weights as f64 / w } else { (w - 1.0) / w * l * s.weights as f64 * traversals };
        collective += xfer(gather);
    }
    optimizer += collective;

    let compute = ga * micro_compute;
    let transfer = ga * l * layer_transfer + xfer(opt_bytes) + collective;
    let exposed_transfer = ga * micro_exposed;
    // written through max() so plans that only differ in hidden work tie exactly
    let micro_total = l * layer_compute.max(layer_transfer) + head_time + first;
    let total = ga * micro_total + optimizer;
    let step_tokens = (plan.ga_steps * plan.micro_batch * cfg.seq_len * workers) as u64;
    let infeasible_in_time = !total.is_finite();
    Ok(TimeBreakdown {
        compute,
        transfer,
        exposed_transfer,
        optimizer,
        total,
        tokens: step_tokens,
        tokens_per_second: if infeasible_in_time { 0.0 } else { step_tokens as f64 / total },
        infeasible_in_time,
    })
}

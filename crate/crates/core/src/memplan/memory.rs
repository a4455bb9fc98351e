use serde::{Deserialize, Serialize};

use super::RunPlan;
use crate::model::{ModelConfig, RecomputeSet};
use crate::offload::{Tensors, TransferPolicy};

/// Driver context, allocator slack and other fixed device overhead.
pub const RESERVED_DEVICE_BYTES: u64 = 500_000_000;
/// Tokens per chunk of the fused LM-head/loss when chunking is on.
pub const CE_CHUNK_TOKENS: u64 = 512;

/// Bytes per category on one tier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categories {
    /// FP8 block weights (codes and scales).
    pub params_fp8: u64,
    /// BF16 weights: master copy of FP8 blocks, BF16 blocks, embedding and head.
    pub params_bf16_master: u64,
    pub moments_m: u64,
    pub moments_v: u64,
    pub grads: u64,
    /// Block-input residual stream kept for backward.
    pub residuals: u64,
    /// Other activations kept for backward.
    pub activations: u64,
    pub logits_workspace: u64,
    pub attn_workspace: u64,
    /// Transient buffers of the layer being processed, including FP8
    /// quantize/transpose copies.
    pub layer_working: u64,
    pub reserved: u64,
}

impl Categories {
    pub fn total(&self) -> u64 {
        self.params_fp8
            + self.params_bf16_master
            + self.moments_m
            + self.moments_v
            + self.grads
            + self.residuals
            + self.activations
            + self.logits_workspace
            + self.attn_workspace
            + self.layer_working
            + self.reserved
    }

    pub fn named(&self) -> [(&'static str, u64); 11] {
        [
            ("params_fp8", self.params_fp8),
            ("params_bf16_master", self.params_bf16_master),
            ("moments_m", self.moments_m),
            ("moments_v", self.moments_v),
            ("grads", self.grads),
            ("residuals", self.residuals),
            ("activations", self.activations),
            ("logits_workspace", self.logits_workspace),
            ("attn_workspace", self.attn_workspace),
            ("layer_working", self.layer_working),
            ("reserved", self.reserved),
        ]
    }
}

/// Device figures are per worker; host figures are for the whole node.
/// `device` is the larger of the two phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub workers: usize,
    pub device: Categories,
    pub host: Categories,
    pub training: Categories,
    pub optimizer: Categories,
    pub peak_phase: Phase,
}

/// Per-layer sizes shared by the breakdown and the residency schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub layers: u64,
    pub tokens: u64,
    /// Weights as used by the matmuls.
    pub weights: u64,
    /// BF16 master copy (FP8 blocks only).
    pub master: u64,
    pub moment: u64,
    pub grads: u64,
    pub residual: u64,
    pub kept_activations: u64,
    pub working: u64,
    pub moment_bytes: u64,
    pub grad_bytes: u64,
}

fn elem(plan: &RunPlan) -> u64 {
    plan.precision.storage().bytes_per_elem() as u64
}

impl LayerSizes {
    pub fn new(cfg: &ModelConfig, plan: &RunPlan) -> Self {
        let fp8 = plan.precision.is_fp8();
        let e = elem(plan);
        let d = cfg.d_model as u64;
        let ff = cfg.d_ff as u64;
        let tokens = (plan.micro_batch * cfg.seq_len) as u64;
        let linear = cfg.linear_params_per_layer();
        let norms = 2 * d;
        let params = linear + norms;
        let weights = if fp8 { linear + 16 + norms * 2 } else { params * e };
        let master = if fp8 { params * 2 } else { 0 };
        let grad_elem = match plan.precision.grad_accum {
            crate::model::GradAccum::Bf16Stochastic => 2,
            crate::model::GradAccum::F32 => 4,
        };
        let moment_bytes = match plan.moments {
            crate::optim::MomentPrecision::F32 => 4,
            crate::optim::MomentPrecision::Bf16 => 2,
        };
        let moment = params * moment_bytes;
        let kept = kept_per_token(cfg, plan, plan.recompute);
        let rebuilt = kept_per_token(cfg, plan, RecomputeSet::NONE) - kept;
        let grads_tmp = (ff + 2 * d) * e;
        // quantized and transposed copy of the widest output gradient
        let quant = if fp8 { 2 * ff } else { 0 };
        let weight_t = if fp8 { linear } else { 0 };
        Self {
            layers: cfg.n_layers as u64,
            tokens,
            weights,
            master,
            moment,
            grads: params * grad_elem,
            residual: tokens * d * e,
            kept_activations: tokens * kept,
            working: tokens * (rebuilt + grads_tmp + quant) + weight_t,
            moment_bytes,
            grad_bytes: grad_elem,
        }
    }
}

/// Bytes per token kept for backward by one layer, residual excluded.
/// Matmul inputs are kept quantized in FP8 mode.
fn kept_per_token(cfg: &ModelConfig, plan: &RunPlan, r: RecomputeSet) -> u64 {
    let e = elem(plan);
    let mm = if plan.precision.is_fp8() { 1 } else { e };
    let d = cfg.d_model as u64;
    let mut kept = 0;
    if !r.drops_norm_out() {
        kept += 2 * (d * mm + 4);
    }
    if !r.drops_qkv() {
        kept += cfg.qkv_dim() as u64 * e;
    }
    if !r.drops_attention() {
        kept += d * mm + cfg.n_heads as u64 * 4;
    }
    if !r.drops_mid_residual() {
        kept += d * e;
    }
    if !r.drops_gate_up() {
        kept += cfg.d_ff as u64 * e;
    }
    if !r.drops_swiglu() {
        kept += cfg.ffn_hidden() as u64 * mm;
    }
    kept
}

/// Device residency of a class: resident copy, or at most two streaming
/// layer buffers when offloaded.
fn placed(resident: u64, layer: u64, layers: u64, offloaded: bool) -> u64 {
    if offloaded {
        resident.min(layers.min(2) * layer)
    } else {
        resident
    }
}

/// Phase that sets the device high-water mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Forward and backward: activations, working set and streaming buffers.
    Training,
    /// Optimizer update: staging buffers for offloaded state.
    Optimizer,
}

/// Device bytes of an offloaded class: two streaming layer buffers, or
/// nothing when read in place.
fn staging(layer: u64, layers: u64, staged: bool) -> u64 {
    if staged {
        layers.min(2) * layer
    } else {
        0
    }
}

pub fn memory_breakdown(cfg: &ModelConfig, plan: &RunPlan, workers: usize) -> MemoryBreakdown {
    let s = LayerSizes::new(cfg, plan);
    let w = workers.max(1) as u64;
    let l = s.layers;
    let e = elem(plan);
    let fp8 = plan.precision.is_fp8();
    let off = |t| plan.offload.contains(t);
    let shard_w = plan.shard_weights && w > 1;
    let shard_g = plan.shard_grads && w > 1;
    let staged = plan.transfer_policy == TransferPolicy::DoubleBuffer;
    let d = cfg.d_model as u64;
    let vocab = cfg.vocab as u64;
    let tokens = s.tokens;
    let rep = cfg.replicated_params();

    // state that lives across both phases
    let mut base = Categories::default();
    let mut host = Categories::default();
    let mut train = Categories::default();
    let mut opt = Categories::default();

    let weights_host = if off(Tensors::Theta) || shard_w { l * s.weights } else { 0 };
    // optimizer-owned state is always sharded across workers
    let opt_layer = |bytes: u64| bytes.div_ceil(w);
    let (w_base, w_train, w_opt) = if off(Tensors::Theta) {
        (0, l.min(2) * s.weights, staging(opt_layer(s.weights), l, staged))
    } else if shard_w {
        // own shard plus two gather buffers
        (l * s.weights / w, l.min(2) * s.weights, 0)
    } else {
        (l * s.weights, 0, 0)
    };
    let master_base = if off(Tensors::Master) { 0 } else { l * opt_layer(s.master) };
    let master_opt = if off(Tensors::Master) { staging(opt_layer(s.master), l, staged) } else { 0 };
    let rep_w = rep * e;
    if fp8 {
        base.params_fp8 = w_base;
        train.params_fp8 = w_train;
        opt.params_fp8 = w_opt;
        host.params_fp8 = weights_host;
        base.params_bf16_master = master_base + rep_w;
        opt.params_bf16_master = master_opt;
        host.params_bf16_master = if off(Tensors::Master) { l * s.master } else { 0 };
    } else {
        base.params_bf16_master = w_base + rep_w;
        train.params_bf16_master = w_train;
        opt.params_bf16_master = w_opt;
        host.params_bf16_master = weights_host;
    }

    let rep_moment = (rep * s.moment_bytes).div_ceil(w);
    for (t, b, o, h) in [
        (Tensors::M, &mut base.moments_m, &mut opt.moments_m, &mut host.moments_m),
        (Tensors::V, &mut base.moments_v, &mut opt.moments_v, &mut host.moments_v),
    ] {
        *b = rep_moment;
        if off(t) {
            *o = staging(opt_layer(s.moment), l, staged);
            *h = l * s.moment;
        } else {
            *b += l * opt_layer(s.moment);
        }
    }

    base.grads = rep * s.grad_bytes;
    if off(Tensors::G) {
        train.grads = l.min(2) * s.grads;
        opt.grads = staging(opt_layer(s.grads), l, staged);
        host.grads = l * s.grads * if shard_g { 1 } else { w };
    } else if shard_g {
        // own shard plus two reduce-scatter buffers
        base.grads += l * s.grads / w;
        train.grads = l.min(2) * s.grads;
    } else {
        base.grads += l * s.grads;
    }

    train.residuals = placed(l * s.residual, s.residual, l, off(Tensors::X));
    host.residuals = if off(Tensors::X) { w * l * s.residual } else { 0 };

    // kept activations, plus the final residual feeding the head
    train.activations = l * s.kept_activations + tokens * d * e;
    train.logits_workspace =
        if plan.chunking { tokens.min(CE_CHUNK_TOKENS) * vocab * e } else { tokens * vocab * (e + 4) };
    let seq = cfg.seq_len as u64;
    let heads = cfg.n_heads as u64;
    let seqs = if plan.chunking { 1 } else { plan.micro_batch as u64 };
    train.attn_workspace = seqs * heads * seq * seq * 4;
    train.layer_working = s.working;
    base.reserved = RESERVED_DEVICE_BYTES;

    let training = add(&base, &train);
    let optimizer = add(&base, &opt);
    let (device, peak_phase) = if optimizer.total() > training.total() {
        (optimizer, Phase::Optimizer)
    } else {
        (training, Phase::Training)
    };
    MemoryBreakdown { workers, device, host, training, optimizer, peak_phase }
}

fn add(a: &Categories, b: &Categories) -> Categories {
    Categories {
        params_fp8: a.params_fp8 + b.params_fp8,
        params_bf16_master: a.params_bf16_master + b.params_bf16_master,
        moments_m: a.moments_m + b.moments_m,
        moments_v: a.moments_v + b.moments_v,
        grads: a.grads + b.grads,
        residuals: a.residuals + b.residuals,
        activations: a.activations + b.activations,
        logits_workspace: a.logits_workspace + b.logits_workspace,
        attn_workspace: a.attn_workspace + b.attn_workspace,
        layer_working: a.layer_working + b.layer_working,
        reserved: a.reserved + b.reserved,
    }
}

impl MemoryBreakdown {
    pub fn device_total(&self) -> u64 {
        self.device.total()
    }

    pub fn host_total(&self) -> u64 {
        self.host.total()
    }

    /// Name of the tier that does not fit, if any.
    pub fn binding_constraint(&self, device_bytes: u64, host_bytes: u64) -> Option<&'static str> {
        if self.device_total() > device_bytes {
            Some("device memory")
        } else if self.host_total() > host_bytes {
            Some("host memory")
        } else {
            None
        }
    }
}

//! Event-level device residency for one micro-step plus the optimizer
//! update: static allocations, A/B streaming buffers, prefetches one layer
//! ahead and write-backs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Tensors, TierBudget, TransferPolicy};
use crate::comms::{Stream, TraceEvent};
use crate::memplan::{Categories, LayerSizes, RunPlan, CE_CHUNK_TOKENS, RESERVED_DEVICE_BYTES};
use crate::model::ModelConfig;

/// Accounting class of a device allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ParamsFp8,
    ParamsBf16Master,
    MomentsM,
    MomentsV,
    Grads,
    Residuals,
    Activations,
    LogitsWorkspace,
    AttnWorkspace,
    LayerWorking,
    Reserved,
}

impl Category {
    fn field(self, c: &mut Categories) -> &mut u64 {
        match self {
            Category::ParamsFp8 => &mut c.params_fp8,
            Category::ParamsBf16Master => &mut c.params_bf16_master,
            Category::MomentsM => &mut c.moments_m,
            Category::MomentsV => &mut c.moments_v,
            Category::Grads => &mut c.grads,
            Category::Residuals => &mut c.residuals,
            Category::Activations => &mut c.activations,
            Category::LogitsWorkspace => &mut c.logits_workspace,
            Category::AttnWorkspace => &mut c.attn_workspace,
            Category::LayerWorking => &mut c.layer_working,
            Category::Reserved => &mut c.reserved,
        }
    }
}

/// One of the two alternating streaming buffers of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BufferSlot {
    A,
    B,
}

impl BufferSlot {
    pub fn for_layer(layer: usize) -> Self {
        if layer % 2 == 0 {
            BufferSlot::A
        } else {
            BufferSlot::B
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Setup,
    Forward,
    Backward,
    Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidencyOp {
    Alloc,
    Free,
    /// Host to device copy into a streaming buffer.
    Prefetch,
    /// Device to host copy out of a streaming buffer.
    Writeback,
    /// Kernel reads or writes host memory in place.
    ZeroCopy,
    /// Gather of a weight shard from the other workers.
    Gather,
    /// Reduce-scatter of a gradient buffer to its owners.
    Scatter,
    Compute,
}

impl ResidencyOp {
    pub fn is_transfer(self) -> bool {
        matches!(self, ResidencyOp::Prefetch | ResidencyOp::Writeback | ResidencyOp::ZeroCopy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidencyEvent {
    pub seq: usize,
    pub pass: Pass,
    pub op: ResidencyOp,
    pub category: Option<Category>,
    pub slot: Option<BufferSlot>,
    /// Layer whose data moves, or the layer being computed.
    pub layer: Option<usize>,
    pub bytes: u64,
    /// Device bytes allocated after this event.
    pub device_bytes: u64,
}

/// Schedule and high-water marks. Infeasible schedules are reported through
/// `feasible`, not rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residency {
    pub events: Vec<ResidencyEvent>,
    /// Largest per-category device allocation seen at any event.
    pub high_water: Categories,
    /// Largest total device allocation seen at any event.
    pub device_high_water: u64,
    pub host_bytes: u64,
    pub device_budget: u64,
    pub host_budget: u64,
    pub feasible: bool,
}

impl Residency {
    pub fn transfers(&self) -> impl Iterator<Item = &ResidencyEvent> {
        self.events.iter().filter(|e| e.op.is_transfer())
    }

    /// Layers resident in the streaming buffers of `category` after each
    /// event, as (slot A, slot B).
    pub fn slot_trace(&self, category: Category) -> Vec<(Option<usize>, Option<usize>)> {
        let mut cur = (None, None);
        let mut out = Vec::new();
        for e in &self.events {
            if e.category != Some(category) {
                continue;
            }
            let Some(slot) = e.slot else { continue };
            let target = match e.op {
                ResidencyOp::Free => None,
                ResidencyOp::Alloc => continue,
                _ => e.layer,
            };
            match slot {
                BufferSlot::A => cur.0 = target,
                BufferSlot::B => cur.1 = target,
            }
            out.push(cur);
        }
        out
    }

    /// Events on the comms trace clock: compute on the main stream,
    /// `layer_seconds` per layer; transfers on the copy stream, each
    /// starting no earlier than its issue point and lasting
    /// `bytes / link_bandwidth`.
    pub fn trace(&self, worker: usize, layer_seconds: f64, link_bandwidth: f64) -> Vec<TraceEvent> {
        let (mut main, mut copy) = (0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(self.events.len());
        for e in &self.events {
            let mut op = serde_json::to_value(e.op).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            if let Some(c) = e.category {
                let name = serde_json::to_value(c).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
                let _ = write!(op, ".{name}");
            }
            if let Some(l) = e.layer {
                let _ = write!(op, ".layer{l}");
            }
            if let Some(slot) = e.slot {
                let _ = write!(op, ".{slot:?}");
            }
            let (time, stream) = match e.op {
                ResidencyOp::Compute => {
                    let t = main;
                    main += layer_seconds;
                    (t, Stream::Main)
                }
                op if op.is_transfer() || matches!(op, ResidencyOp::Gather | ResidencyOp::Scatter) => {
                    let t = copy.max(main);
                    copy = t + e.bytes as f64 / link_bandwidth;
                    (t, Stream::Copy)
                }
                _ => (main, Stream::Main),
            };
            out.push(TraceEvent { time, worker, stream, op, bytes: e.bytes });
        }
        out
    }

    /// JSON-lines export in the comms trace format.
    pub fn to_jsonl(&self, worker: usize, layer_seconds: f64, link_bandwidth: f64) -> String {
        crate::comms::to_jsonl(&self.trace(worker, layer_seconds, link_bandwidth))
    }
}

struct Builder {
    events: Vec<ResidencyEvent>,
    now: Categories,
    high: Categories,
    total_high: u64,
}

impl Builder {
    fn push(&mut self, pass: Pass, op: ResidencyOp, category: Option<Category>, slot: Option<BufferSlot>, layer: Option<usize>, bytes: u64) {
        if let Some(c) = category {
            let f = c.field(&mut self.now);
            match op {
                ResidencyOp::Alloc => *f += bytes,
                ResidencyOp::Free => *f -= bytes,
                _ => {}
            }
            let v = *f;
            let h = c.field(&mut self.high);
            *h = (*h).max(v);
        }
        let total = self.now.total();
        self.total_high = self.total_high.max(total);
        self.events.push(ResidencyEvent {
            seq: self.events.len(),
            pass,
            op,
            category,
            slot,
            layer,
            bytes,
            device_bytes: total,
        });
    }

    fn alloc(&mut self, pass: Pass, c: Category, bytes: u64) {
        if bytes > 0 {
            self.push(pass, ResidencyOp::Alloc, Some(c), None, None, bytes);
        }
    }

    fn free(&mut self, pass: Pass, c: Category, bytes: u64) {
        if bytes > 0 {
            self.push(pass, ResidencyOp::Free, Some(c), None, None, bytes);
        }
    }

    fn slots(&mut self, pass: Pass, s: &Flow, alloc: bool) {
        let op = if alloc { ResidencyOp::Alloc } else { ResidencyOp::Free };
        for slot in [BufferSlot::A, BufferSlot::B].into_iter().take(s.buffers) {
            self.push(pass, op, Some(s.category), Some(slot), None, s.layer_bytes);
        }
    }

    fn mv(&mut self, pass: Pass, op: ResidencyOp, s: &Flow, layer: usize) {
        let slot = if op == ResidencyOp::ZeroCopy { None } else { Some(BufferSlot::for_layer(layer)) };
        self.push(pass, op, Some(s.category), slot, Some(layer), s.layer_bytes);
    }
}

/// A class moved layer by layer.
#[derive(Clone, Copy)]
struct Flow {
    category: Category,
    layer_bytes: u64,
    /// 0 for zero-copy access.
    buffers: usize,
    read: ResidencyOp,
    write: Option<ResidencyOp>,
}

/// Builds the schedule of one micro-step (forward, backward) followed by
/// the optimizer update, for worker 0. `budget.transfer_policy` decides how
/// offloaded optimizer state is reached and overrides the plan's policy.
pub fn plan_residency(cfg: &ModelConfig, plan: &RunPlan, budget: &TierBudget, workers: usize) -> Residency {
    let plan = RunPlan { transfer_policy: budget.transfer_policy, ..*plan };
    let s = LayerSizes::new(cfg, &plan);
    let n = cfg.n_layers;
    let l = n as u64;
    let w = workers.max(1) as u64;
    let fp8 = plan.precision.is_fp8();
    let e = plan.precision.storage().bytes_per_elem() as u64;
    let off = |t| plan.offload.contains(t);
    let shard_w = plan.shard_weights && w > 1;
    let shard_g = plan.shard_grads && w > 1;
    let staged = plan.transfer_policy == TransferPolicy::DoubleBuffer;
    let two = n.min(2);
    let rep = cfg.replicated_params();
    let weight_cat = if fp8 { Category::ParamsFp8 } else { Category::ParamsBf16Master };
    let per_worker = |b: u64| b.div_ceil(w);

    let mut b = Builder { events: Vec::new(), now: Categories::default(), high: Categories::default(), total_high: 0 };
    let setup = Pass::Setup;

    // persistent allocations
    b.alloc(setup, Category::Reserved, RESERVED_DEVICE_BYTES);
    b.alloc(setup, Category::ParamsBf16Master, rep * e);
    for c in [Category::MomentsM, Category::MomentsV] {
        b.alloc(setup, c, per_worker(rep * s.moment_bytes));
    }
    b.alloc(setup, Category::Grads, rep * s.grad_bytes);
    let mut train_streams = Vec::new();
    if off(Tensors::Theta) {
        train_streams.push(Flow { category: weight_cat, layer_bytes: s.weights, buffers: two, read: ResidencyOp::Prefetch, write: None });
    } else if shard_w {
        b.alloc(setup, weight_cat, l * s.weights / w);
        train_streams.push(Flow { category: weight_cat, layer_bytes: s.weights, buffers: two, read: ResidencyOp::Gather, write: None });
    } else {
        b.alloc(setup, weight_cat, l * s.weights);
    }
    if fp8 && !off(Tensors::Master) {
        b.alloc(setup, Category::ParamsBf16Master, l * per_worker(s.master));
    }
    for (t, c) in [(Tensors::M, Category::MomentsM), (Tensors::V, Category::MomentsV)] {
        if !off(t) {
            b.alloc(setup, c, l * per_worker(s.moment));
        }
    }
    let grad_stream = if off(Tensors::G) {
        Some(Flow { category: Category::Grads, layer_bytes: s.grads, buffers: two, read: ResidencyOp::Prefetch, write: Some(ResidencyOp::Writeback) })
    } else if shard_g {
        b.alloc(setup, Category::Grads, l * s.grads / w);
        Some(Flow { category: Category::Grads, layer_bytes: s.grads, buffers: two, read: ResidencyOp::Prefetch, write: Some(ResidencyOp::Scatter) })
    } else {
        b.alloc(setup, Category::Grads, l * s.grads);
        None
    };
    let x_stream = off(Tensors::X).then_some(Flow {
        category: Category::Residuals,
        layer_bytes: s.residual,
        buffers: two,
        read: ResidencyOp::Prefetch,
        write: Some(ResidencyOp::Writeback),
    });

    // training pass
    let tokens = s.tokens;
    let d = cfg.d_model as u64;
    let seqs = if plan.chunking { 1 } else { plan.micro_batch as u64 };
    let seq = cfg.seq_len as u64;
    let statics = [
        (Category::Activations, l * s.kept_activations + tokens * d * e),
        (Category::Residuals, if x_stream.is_some() { 0 } else { l * s.residual }),
        (
            Category::LogitsWorkspace,
            if plan.chunking { tokens.min(CE_CHUNK_TOKENS) * cfg.vocab as u64 * e } else { tokens * cfg.vocab as u64 * (e + 4) },
        ),
        (Category::AttnWorkspace, seqs * cfg.n_heads as u64 * seq * seq * 4),
        (Category::LayerWorking, s.working),
    ];
    let fwd = Pass::Forward;
    for &(c, bytes) in &statics {
        b.alloc(fwd, c, bytes);
    }
    for st in train_streams.iter().chain(grad_stream.iter()).chain(x_stream.iter()) {
        b.slots(fwd, st, true);
    }
    // forward: weights one layer ahead, residual inputs written back
    for st in &train_streams {
        b.mv(fwd, st.read, st, 0);
    }
    for i in 0..n {
        if i + 1 < n {
            for st in &train_streams {
                b.mv(fwd, st.read, st, i + 1);
            }
        }
        b.push(fwd, ResidencyOp::Compute, None, None, Some(i), 0);
        if let Some(x) = &x_stream {
            b.mv(fwd, ResidencyOp::Writeback, x, i);
        }
    }
    // backward in reverse layer order
    let bwd = Pass::Backward;
    let order: Vec<usize> = (0..n).rev().collect();
    let prefetch = |b: &mut Builder, layer: usize| {
        for st in &train_streams {
            b.mv(bwd, st.read, st, layer);
        }
        if let Some(x) = &x_stream {
            b.mv(bwd, ResidencyOp::Prefetch, x, layer);
        }
    };
    if let Some(&first) = order.first() {
        prefetch(&mut b, first);
    }
    for (k, &i) in order.iter().enumerate() {
        if let Some(&next) = order.get(k + 1) {
            prefetch(&mut b, next);
        }
        b.push(bwd, ResidencyOp::Compute, None, None, Some(i), 0);
        if let Some(g) = &grad_stream {
            b.mv(bwd, g.write.expect("grad stream writes"), g, i);
        }
    }
    for st in train_streams.iter().chain(grad_stream.iter()).chain(x_stream.iter()) {
        b.slots(bwd, st, false);
    }
    for &(c, bytes) in statics.iter().rev() {
        b.free(bwd, c, bytes);
    }

    // optimizer update over this worker's slice of every layer
    let opt = Pass::Optimizer;
    let (read, buffers) = if staged { (ResidencyOp::Prefetch, two) } else { (ResidencyOp::ZeroCopy, 0) };
    let write = Some(if staged { ResidencyOp::Writeback } else { ResidencyOp::ZeroCopy });
    let mut opt_streams = Vec::new();
    let mut add = |t: Tensors, category: Category, bytes: u64, reads: bool| {
        if off(t) {
            opt_streams.push((Flow { category, layer_bytes: per_worker(bytes), buffers, read, write }, reads));
        }
    };
    add(Tensors::M, Category::MomentsM, s.moment, true);
    add(Tensors::V, Category::MomentsV, s.moment, true);
    add(Tensors::G, Category::Grads, s.grads, true);
    if fp8 {
        add(Tensors::Master, Category::ParamsBf16Master, s.master, true);
        // FP8 weights are requantized from the master and only written
        add(Tensors::Theta, Category::ParamsFp8, s.weights, false);
    } else {
        add(Tensors::Theta, Category::ParamsBf16Master, s.weights, true);
    }
    for (st, _) in &opt_streams {
        b.slots(opt, st, true);
    }
    let fetch = |b: &mut Builder, layer: usize| {
        for (st, reads) in &opt_streams {
            if *reads {
                b.mv(opt, st.read, st, layer);
            }
        }
    };
    if n > 0 {
        fetch(&mut b, 0);
    }
    for i in 0..n {
        if i + 1 < n {
            fetch(&mut b, i + 1);
        }
        b.push(opt, ResidencyOp::Compute, None, None, Some(i), 0);
        for (st, _) in &opt_streams {
            if st.category != Category::Grads {
                b.mv(opt, st.write.expect("optimizer writes"), st, i);
            }
        }
    }
    for (st, _) in &opt_streams {
        b.slots(opt, st, false);
    }

    let host_bytes = crate::memplan::memory_breakdown(cfg, &plan, workers).host_total();
    Residency {
        feasible: b.total_high <= budget.device_bytes && host_bytes <= budget.host_bytes,
        events: b.events,
        high_water: b.high,
        device_high_water: b.total_high,
        host_bytes,
        device_budget: budget.device_bytes,
        host_budget: budget.host_bytes,
    }
}

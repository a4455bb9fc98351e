//! Report builders behind the subcommands. Each returns plain data that
//! `main` prints as a table or as JSON.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use qtrain_core::comms::{
    barrier_protocol, reduce_scatter_copy, reduce_scatter_trace, Executor, IssueModel, Outcome, QueueOp, RsConfig,
    RsRounding, Stream, Topology, TraceEvent, WorkerGroup,
};
use qtrain_core::memplan::{
    estimate_step_time, flop_breakdown, fp8_speedup_ceiling, memory_breakdown, qwen25, search_plan, FlopBreakdown,
    HardwareProfile, MemoryBreakdown, PlanReport, RunPlan, SearchMode, SearchOptions, TimeBreakdown, GB, QWEN_SIZES,
};
use qtrain_core::model::{ModelConfig, PrecisionMap};
use qtrain_core::numerics::{rng_unit_f32, stream_id, RngKey};
use serde::Serialize;

/// `toy`, a Qwen2.5 size such as `7b`, or a TOML file of model dimensions.
pub fn resolve_model(name: &str) -> Result<ModelConfig> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ModelConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        return Ok(cfg);
    }
    let key = name.to_ascii_lowercase();
    let key = key.trim_start_matches("qwen2.5-").trim_start_matches("qwen25-");
    if key == "toy" {
        return Ok(ModelConfig::toy());
    }
    qwen25(key).with_context(|| format!("unknown model '{name}'; available: toy, {}, or a .toml file", QWEN_SIZES.join(", ")))
}

fn gb(bytes: u64) -> f64 {
    bytes as f64 / GB
}

// ---------------------------------------------------------------- plan

#[derive(Debug, Clone, Serialize)]
pub struct PlanCommandReport {
    pub model: ModelConfig,
    pub hardware: String,
    pub workers: usize,
    pub mode: SearchMode,
    pub report: PlanReport,
}

pub fn plan(cfg: &ModelConfig, hw: &HardwareProfile, workers: usize, opts: &SearchOptions, top: usize) -> Result<PlanCommandReport> {
    let mut report = search_plan(cfg, hw, workers, opts)?;
    report.feasible.truncate(top);
    Ok(PlanCommandReport { model: cfg.clone(), hardware: hw.name.clone(), workers, mode: opts.mode, report })
}

impl PlanCommandReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{} on {} x{} ({:?} search, {} plans evaluated)",
            describe(&self.model),
            self.hardware,
            self.workers,
            self.mode,
            self.report.evaluated
        )
        .unwrap();
        if self.report.feasible.is_empty() {
            let why = self.report.binding_constraint.as_deref().unwrap_or("unknown");
            writeln!(out, "no feasible plan: out of {why}").unwrap();
            return out;
        }
        writeln!(
            out,
            "{:>4} {:>4} {:>5} {:<24} {:<18} {:<8} {:>9} {:>9} {:>10} {:>9} {:>8}",
            "rank", "mb", "ga", "recompute", "offload", "shard", "device_GB", "host_GB", "tokens/s", "step_s", "exposed"
        )
        .unwrap();
        for (i, r) in self.report.feasible.iter().enumerate() {
            let p = &r.plan;
            let shard = match (p.shard_weights, p.shard_grads) {
                (true, true) => "w,g",
                (true, false) => "w",
                (false, true) => "g",
                (false, false) => "-",
            };
            writeln!(
                out,
                "{:>4} {:>4} {:>5} {:<24} {:<18} {:<8} {:>9.2} {:>9.2} {:>10.0} {:>9.3} {:>7.1}%",
                i + 1,
                p.micro_batch,
                p.ga_steps,
                p.recompute.to_string(),
                p.offload.to_string(),
                shard,
                gb(r.memory.device_total()),
                gb(r.memory.host_total()),
                r.time.tokens_per_second,
                r.time.total,
                100.0 * r.time.exposed_fraction()
            )
            .unwrap();
        }
        out
    }
}

fn describe(cfg: &ModelConfig) -> String {
    format!(
        "{:.2}B params ({} layers, d={}, vocab={}, seq={})",
        cfg.param_count() as f64 / 1e9,
        cfg.n_layers,
        cfg.d_model,
        cfg.vocab,
        cfg.seq_len
    )
}

// ---------------------------------------------------------------- flops

#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub model: ModelConfig,
    pub precision: PrecisionMap,
    pub per_token: FlopBreakdown,
    pub total_per_token: f64,
    pub hardware: Option<String>,
    pub lower_bound_tokens_per_second: Option<f64>,
    pub fp8_speedup_ceiling: Option<f64>,
}

pub fn report_flops(cfg: &ModelConfig, precision: PrecisionMap, hw: Option<&HardwareProfile>) -> Result<FlopReport> {
    let per_token = flop_breakdown(cfg, &precision);
    let (lower, ceiling) = match hw {
        Some(hw) => (Some(1.0 / per_token.lower_bound(hw)?), Some(fp8_speedup_ceiling(cfg, hw)?)),
        None => (None, None),
    };
    Ok(FlopReport {
        model: cfg.clone(),
        precision,
        total_per_token: per_token.total(),
        per_token,
        hardware: hw.map(|h| h.name.clone()),
        lower_bound_tokens_per_second: lower,
        fp8_speedup_ceiling: ceiling,
    })
}

impl FlopReport {
    pub fn table(&self) -> String {
        let f = &self.per_token;
        let mut out = format!("{} at {}\n", describe(&self.model), self.precision);
        let rows = [
            ("fp8 linear", f.fp8_linear),
            ("bf16 linear", f.bf16_linear),
            ("f32 linear", f.f32_linear),
            ("bf16 lm head", f.bf16_lmhead),
            ("bf16 attention", f.bf16_attention),
            ("elementwise", f.other),
            ("total", self.total_per_token),
        ];
        writeln!(out, "{:<16} {:>14}", "ops/token", "").unwrap();
        for (name, v) in rows {
            writeln!(out, "{name:<16} {:>14.4e}", v).unwrap();
        }
        if let (Some(hw), Some(tps), Some(c)) = (&self.hardware, self.lower_bound_tokens_per_second, self.fp8_speedup_ceiling) {
            writeln!(out, "{hw}: lower-bound {tps:.0} tokens/s, fp8 speed-up ceiling {c:.3}").unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------- memory

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub model: ModelConfig,
    pub plan: RunPlan,
    pub workers: usize,
    pub memory: MemoryBreakdown,
    pub hardware: Option<String>,
    pub binding_constraint: Option<String>,
    pub time: Option<TimeBreakdown>,
}

pub fn report_memory(cfg: &ModelConfig, plan: &RunPlan, workers: usize, hw: Option<&HardwareProfile>) -> Result<MemoryReport> {
    for w in plan.validate(workers)? {
        eprintln!("warning: {w}");
    }
    let memory = memory_breakdown(cfg, plan, workers);
    let (binding, time) = match hw {
        Some(hw) => (
            memory.binding_constraint(hw.device_bytes, hw.host_bytes).map(str::to_string),
            Some(estimate_step_time(cfg, plan, hw, workers)?),
        ),
        None => (None, None),
    };
    Ok(MemoryReport {
        model: cfg.clone(),
        plan: *plan,
        workers,
        memory,
        hardware: hw.map(|h| h.name.clone()),
        binding_constraint: binding,
        time,
    })
}

impl MemoryReport {
    pub fn table(&self) -> String {
        let m = &self.memory;
        let mut out = format!("{}\nplan: {} (workers {})\n", describe(&self.model), self.plan, self.workers);
        writeln!(out, "{:<20} {:>10} {:>10}", "GB", "device", "host").unwrap();
        for ((name, d), (_, h)) in m.device.named().iter().zip(m.host.named()) {
            writeln!(out, "{name:<20} {:>10.3} {:>10.3}", gb(*d), gb(h)).unwrap();
        }
        writeln!(out, "{:<20} {:>10.3} {:>10.3}", "total", gb(m.device_total()), gb(m.host_total())).unwrap();
        writeln!(out, "device peak during the {:?} phase", m.peak_phase).unwrap();
        if let Some(hw) = &self.hardware {
            match &self.binding_constraint {
                Some(c) => writeln!(out, "{hw}: does not fit ({c})").unwrap(),
                None => writeln!(out, "{hw}: fits").unwrap(),
            }
        }
        if let Some(t) = &self.time {
            writeln!(out, "step {:.3} s, {:.0} tokens/s, exposed transfer {:.1}%", t.total, t.tokens_per_second, 100.0 * t.exposed_fraction())
                .unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------- comms

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub workers: usize,
    /// Gradient bytes per tensor (f32 elements times 4).
    pub sizes: Vec<u64>,
    pub p2p: bool,
    pub link_bandwidth: f64,
    pub seed: u64,
    pub barrier: bool,
    pub queue_capacity: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorVolume {
    pub bytes: u64,
    pub rounds: usize,
    /// Bytes each worker sends per direction, measured from the trace.
    pub sent_per_worker: u64,
    /// `(W - 1) / W * bytes`.
    pub closed_form: f64,
    pub link_traversals: u64,
    /// Largest |result - direct sum| over all elements.
    pub max_abs_error: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub workers: usize,
    pub p2p: bool,
    pub tensors: Vec<TensorVolume>,
    pub barrier: bool,
    pub queue_capacity: usize,
    pub deadlock: bool,
    pub deadlock_states: usize,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

/// Two workers, one of them a few kernels behind at its first collective:
/// the smallest schedule that exposes the shared issue-queue hang.
fn delayed_peer_schedule(extra_kernels: usize) -> Vec<Vec<QueueOp>> {
    let mut w0 = vec![QueueOp::Collective(0)];
    w0.extend(std::iter::repeat_n(QueueOp::Kernel, extra_kernels));
    vec![w0, vec![QueueOp::Kernel, QueueOp::Collective(0)]]
}

pub fn simulate_comms(o: &SimulateOptions) -> Result<SimulateReport> {
    let w = o.workers;
    if w == 0 {
        bail!("need at least one worker");
    }
    let topology = Topology { p2p: o.p2p, link_bandwidth: o.link_bandwidth, copy_engines: 2 };
    let group = WorkerGroup::new(w, topology);
    let mut tensors = Vec::new();
    let mut trace = Vec::new();
    let mut t0 = 0.0;
    for (k, &bytes) in o.sizes.iter().enumerate() {
        let len = (bytes / 4) as usize;
        let per = len.div_ceil(w).max(1);
        let key = RngKey::new(o.seed, stream_id(&format!("simulate-comms.{k}")), 0);
        let grads: Vec<Vec<f32>> = (0..w)
            .map(|wi| (0..per * w).map(|i| if i < len { 2.0 * rng_unit_f32(key.with_counter((wi * per * w + i) as u64)) - 1.0 } else { 0.0 }).collect())
            .collect();
        let chunks: Vec<Vec<Vec<f32>>> = grads.iter().map(|g| g.chunks(per).map(<[f32]>::to_vec).collect()).collect();
        let cfg = RsConfig { seed: o.seed, step: 0, layer: k as u64, rounding: RsRounding::F32, pieces: 2 };
        let out = reduce_scatter_copy(chunks, vec![vec![0.0; per]; w], &cfg, Executor::Threaded)?;
        let mut max_abs_error = 0.0f32;
        for (wi, shard) in out.shards.iter().enumerate() {
            for (e, &x) in shard.iter().enumerate() {
                let direct: f32 = grads.iter().map(|g| g[wi * per + e]).sum();
                max_abs_error = max_abs_error.max((x - direct).abs());
            }
        }
        let chunk_bytes = per as u64 * 4;
        let add_time = chunk_bytes as f64 / 1e12;
        let ev = reduce_scatter_trace(&group, chunk_bytes, t0, add_time);
        let traversals = topology.link_traversals();
        let copied: u64 = ev.iter().filter(|e| e.worker == 0 && e.stream == Stream::Copy).map(|e| e.bytes).sum();
        t0 = ev.iter().map(|e| e.time).fold(t0, f64::max) + add_time;
        trace.extend(ev);
        tensors.push(TensorVolume {
            bytes: chunk_bytes * w as u64,
            rounds: out.audit.rounds,
            sent_per_worker: copied / traversals,
            closed_form: (w as f64 - 1.0) / w as f64 * (chunk_bytes * w as u64) as f64,
            link_traversals: traversals * (w as u64 - 1),
            max_abs_error,
        });
    }
    let model = IssueModel { capacity: Some(o.queue_capacity), shared: true, barrier: o.barrier };
    let outcome = barrier_protocol(&delayed_peer_schedule(o.queue_capacity), model);
    let (deadlock, states) = match outcome {
        Outcome::Deadlock { states, .. } => (true, states),
        Outcome::Completed { states, .. } => (false, states),
    };
    Ok(SimulateReport {
        workers: w,
        p2p: o.p2p,
        tensors,
        barrier: o.barrier,
        queue_capacity: o.queue_capacity,
        deadlock,
        deadlock_states: states,
        trace,
    })
}

impl SimulateReport {
    pub fn table(&self) -> String {
        let mut out = format!("reduce-scatter over {} workers (p2p: {})\n", self.workers, self.p2p);
        writeln!(
            out,
            "{:>12} {:>7} {:>14} {:>16} {:>11} {:>10}",
            "bytes", "rounds", "sent/worker", "(W-1)/W*bytes", "traversals", "max_err"
        )
        .unwrap();
        for t in &self.tensors {
            writeln!(
                out,
                "{:>12} {:>7} {:>14} {:>16.0} {:>11} {:>10.2e}",
                t.bytes, t.rounds, t.sent_per_worker, t.closed_form, t.link_traversals, t.max_abs_error
            )
            .unwrap();
        }
        writeln!(
            out,
            "issue queue capacity {}, barrier {}: {} ({} states explored)",
            self.queue_capacity,
            if self.barrier { "on" } else { "off" },
            if self.deadlock { "DEADLOCK reachable" } else { "no deadlock" },
            self.deadlock_states
        )
        .unwrap();
        out
    }
}

//! Simulated multi-worker runtime over a shared address space.
//!
//! Workers are contexts inside one process that read and write each other's
//! buffers directly. Collectives are built from pure copies plus local
//! arithmetic, and every protocol can run under a seeded random
//! interleaving (lockstep) or on real threads; results must not depend on
//! which.

mod collectives;
mod deadlock;
mod trace;
mod volume;

pub use collectives::{
    all_gather_copy, all_gather_fp8, reduce_scatter_copy, Executor, GatheredFp8, ProtocolAudit, ReduceScatterOut,
    RsConfig, RsRounding,
};
pub use deadlock::{barrier_protocol, IssueModel, Outcome, QueueOp, Transition};
pub use trace::{all_gather_trace, reduce_scatter_trace, to_jsonl, TraceEvent};
pub use volume::{
    grad_shard_traffic, host_weight_cache, weight_shard_traffic, CacheEvent, CacheEventKind, CachePlan, CacheReport,
    HostWeightCache, Pass, VolumeInputs,
};

pub use crate::model::Stream;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Direct device-to-device copies. Without it every inter-worker
    /// transfer crosses the host link twice.
    pub p2p: bool,
    /// Bytes per second per direction.
    pub link_bandwidth: f64,
    pub copy_engines: usize,
}

impl Topology {
    /// Four consumer cards on PCIe 4.0 without peer-to-peer.
    pub fn pcie4_consumer() -> Self {
        Self { p2p: false, link_bandwidth: 64e9, copy_engines: 2 }
    }

    pub fn link_traversals(&self) -> u64 {
        if self.p2p {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerGroup {
    pub workers: usize,
    pub topology: Topology,
}

impl WorkerGroup {
    pub fn new(workers: usize, topology: Topology) -> Self {
        Self { workers, topology }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommsError {
    #[error("expected {expected} shards/chunks, got {got}")]
    WorkerCount { expected: usize, got: usize },
    #[error("worker {worker}: size {got} differs from {expected}")]
    SizeMismatch { worker: usize, expected: usize, got: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("host cache read at step {step} before the weights were published")]
    CacheMiss { step: u64 },
}

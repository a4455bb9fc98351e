use serde::{Deserialize, Serialize};

use super::{CommsError, WorkerGroup};

/// Host-resident copy of the sharded weights, valid for one optimizer step.
#[derive(Debug, Clone, Default)]
pub struct HostWeightCache {
    published: Option<u64>,
}

impl HostWeightCache {
    pub fn publish(&mut self, step: u64) {
        self.published = Some(step);
    }

    pub fn read(&self, step: u64) -> Result<(), CommsError> {
        match self.published {
            Some(s) if s == step => Ok(()),
            _ => Err(CommsError::CacheMiss { step }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheEventKind {
    Publish,
    CachedRead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub micro_step: usize,
    pub pass: Pass,
    pub kind: CacheEventKind,
    /// New link traffic charged to this event.
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePlan {
    pub ga_steps: usize,
    pub params: u64,
    /// Weight tensors, each carrying one f32 scale in FP8.
    pub tensors: u64,
    pub fp8: bool,
}

impl CachePlan {
    pub fn weight_bytes(&self) -> u64 {
        if self.fp8 {
            self.params + 4 * self.tensors
        } else {
            2 * self.params
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub events: Vec<CacheEvent>,
    /// New weight traffic per micro-batch.
    pub per_microbatch: Vec<u64>,
    pub total: u64,
}

/// Weight movement for one optimizer step with host caching: the first
/// forward publishes, every later pass in the accumulation window reads the
/// cache.
pub fn host_weight_cache(group: &WorkerGroup, plan: &CachePlan) -> Result<CacheReport, CommsError> {
    if group.workers == 0 || plan.ga_steps == 0 {
        return Err(CommsError::Protocol("empty group or accumulation window".into()));
    }
    let mut cache = HostWeightCache::default();
    let step = 0;
    let mut events = Vec::new();
    let mut per_microbatch = vec![0u64; plan.ga_steps];
    for (micro_step, traffic) in per_microbatch.iter_mut().enumerate() {
        for pass in [Pass::Forward, Pass::Backward] {
            let ev = if micro_step == 0 && pass == Pass::Forward {
                cache.publish(step);
                CacheEvent { micro_step, pass, kind: CacheEventKind::Publish, bytes: plan.weight_bytes() }
            } else {
                cache.read(step)?;
                CacheEvent { micro_step, pass, kind: CacheEventKind::CachedRead, bytes: 0 }
            };
            *traffic += ev.bytes;
            events.push(ev);
        }
    }
    let total = per_microbatch.iter().sum();
    Ok(CacheReport { events, per_microbatch, total })
}

/// Inputs of the per-optimizer-step communication volume model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeInputs {
    pub params: u64,
    pub weight_bytes_per_param: f64,
    pub grad_bytes_per_param: f64,
    pub ga_steps: u64,
    pub host_cache: bool,
}

/// Link bytes for sharded weights over one optimizer step, summed over workers.
pub fn weight_shard_traffic(group: &WorkerGroup, v: &VolumeInputs) -> f64 {
    let bytes = v.params as f64 * v.weight_bytes_per_param;
    if v.host_cache {
        return bytes;
    }
    let w = group.workers as f64;
    let per_gather = (w - 1.0) * bytes * group.topology.link_traversals() as f64;
    2.0 * v.ga_steps as f64 * per_gather
}

/// Link bytes for sharded gradients: one reduce-scatter per micro-batch.
pub fn grad_shard_traffic(group: &WorkerGroup, v: &VolumeInputs) -> f64 {
    let w = group.workers as f64;
    let bytes = v.params as f64 * v.grad_bytes_per_param;
    v.ga_steps as f64 * (w - 1.0) * bytes * group.topology.link_traversals() as f64
}

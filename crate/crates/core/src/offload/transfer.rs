use serde::{Deserialize, Serialize};

use crate::comms::Topology;

/// Fixed cost of issuing one transfer, seconds.
pub const TRANSFER_LATENCY: f64 = 20e-6;

/// How the device reaches offloaded data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPolicy {
    /// Kernels read pinned host memory directly.
    ZeroCopy,
    /// Explicit copies into device staging buffers, one buffer in use and
    /// one being filled.
    DoubleBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierBudget {
    pub device_bytes: u64,
    pub host_bytes: u64,
    pub transfer_policy: TransferPolicy,
    /// Fraction of link bandwidth reached by zero-copy reads.
    pub zero_copy_efficiency: f64,
    /// Device memory bandwidth, paid once more by the staging copy of a
    /// double-buffered transfer.
    pub mem_bandwidth: f64,
}

/// Seconds to move `bytes` between host and device.
pub fn transfer_time(bytes: u64, budget: &TierBudget, topology: &Topology) -> f64 {
    if bytes == 0 {
        return TRANSFER_LATENCY;
    }
    let b = bytes as f64;
    let link = match budget.transfer_policy {
        TransferPolicy::ZeroCopy => b / (topology.link_bandwidth * budget.zero_copy_efficiency),
        TransferPolicy::DoubleBuffer => b / topology.link_bandwidth + b / budget.mem_bandwidth,
    };
    TRANSFER_LATENCY + link
}

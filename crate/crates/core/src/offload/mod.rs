//! Two-tier (device, host) placement: which tensor classes live on the
//! host, how transfers are costed, and the double-buffered per-layer
//! schedule that keeps offloaded blocks streaming one layer ahead.
//!
//! Placement is simulated over the same buffers, so offloading never
//! changes numerical results.

mod residency;
mod set;
mod transfer;

pub use residency::{plan_residency, BufferSlot, Category, Pass, Residency, ResidencyEvent, ResidencyOp};
pub use set::{OffloadSet, Tensors};
pub use transfer::{transfer_time, TierBudget, TransferPolicy, TRANSFER_LATENCY};

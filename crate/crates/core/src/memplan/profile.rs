use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PlanError;
use crate::comms::Topology;
use crate::offload::{TierBudget, TransferPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub device_bytes: u64,
    pub host_bytes: u64,
    /// FLOP/s keyed by precision name (`fp8`, `bf16`, `f32`).
    pub peak_flops: BTreeMap<String, f64>,
    pub mem_bandwidth: f64,
    pub link_bandwidth: f64,
    pub p2p: bool,
    pub copy_engines: usize,
    /// Measured large-matmul rate over spec-sheet peak.
    pub attainable_fraction: f64,
    pub zero_copy_efficiency: f64,
}

const BUILTIN: [(&str, &str); 5] = [
    ("rtx5060ti", include_str!("../../profiles/rtx5060ti.toml")),
    ("rtx4090", include_str!("../../profiles/rtx4090.toml")),
    ("l40s", include_str!("../../profiles/l40s.toml")),
    ("h100", include_str!("../../profiles/h100.toml")),
    ("dgx-spark", include_str!("../../profiles/dgx-spark.toml")),
];

impl HardwareProfile {
    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        let p: HardwareProfile = toml::from_str(text).map_err(|e| PlanError::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.attainable_fraction > 0.0 && self.attainable_fraction <= 1.2) {
            return Err(PlanError::Profile(format!(
                "{}: attainable_fraction {} outside (0, 1.2]",
                self.name, self.attainable_fraction
            )));
        }
        if self.peak_flops.values().any(|&f| f <= 0.0) {
            return Err(PlanError::Profile(format!("{}: peak FLOP/s must be positive", self.name)));
        }
        Ok(())
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self, PlanError> {
        let want = name.to_ascii_lowercase().replace(['_', ' '], "-");
        let want = want.trim_start_matches("rtx-");
        BUILTIN
            .iter()
            .find(|(n, _)| *n == want || n.trim_start_matches("rtx") == want)
            .map(|(_, text)| Self::from_toml(text))
            .unwrap_or_else(|| {
                Err(PlanError::UnknownProfile { name: name.to_string(), available: Self::builtin_names().join(", ") })
            })
    }

    pub fn peak(&self, precision: &str) -> Result<f64, PlanError> {
        self.peak_flops
            .get(precision)
            .copied()
            .ok_or_else(|| PlanError::UnknownPrecision(precision.to_string()))
    }

    pub fn topology(&self) -> Topology {
        Topology { p2p: self.p2p, link_bandwidth: self.link_bandwidth, copy_engines: self.copy_engines }
    }

    pub fn budget(&self, transfer_policy: TransferPolicy) -> TierBudget {
        TierBudget {
            device_bytes: self.device_bytes,
            host_bytes: self.host_bytes,
            transfer_policy,
            zero_copy_efficiency: self.zero_copy_efficiency,
            mem_bandwidth: self.mem_bandwidth,
        }
    }

    /// The faster transfer policy for this profile.
    pub fn preferred_policy(&self) -> TransferPolicy {
        let staged = 1.0 / self.link_bandwidth + 1.0 / self.mem_bandwidth;
        let direct = 1.0 / (self.link_bandwidth * self.zero_copy_efficiency);
        if direct < staged {
            TransferPolicy::ZeroCopy
        } else {
            TransferPolicy::DoubleBuffer
        }
    }
}

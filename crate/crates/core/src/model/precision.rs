use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::F8Kind;
use crate::tensorops::Storage;

/// Precision of the matmuls inside transformer blocks.
///
/// `F32` is a reference mode for oracle tests: every stored activation stays
/// in f32 and no quantization happens anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockPrecision {
    Fp8E4m3,
    Bf16,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradAccum {
    /// BF16 buffers, each add rounded stochastically.
    Bf16Stochastic,
    /// f32 buffers; reference mode.
    F32,
}

/// Which format each part of the pipeline computes in.
///
/// LM head and attention always run in BF16 (or f32 in the reference mode)
/// and have no switch here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrecisionMap {
    pub block_matmuls: BlockPrecision,
    /// Format of activation gradients fed to FP8 backward matmuls.
    pub backward_grads: F8Kind,
    pub grad_accum: GradAccum,
}

impl PrecisionMap {
    pub const FP8: PrecisionMap = PrecisionMap {
        block_matmuls: BlockPrecision::Fp8E4m3,
        backward_grads: F8Kind::E4M3,
        grad_accum: GradAccum::Bf16Stochastic,
    };
    pub const FP8_E5M2_BACKWARD: PrecisionMap = PrecisionMap {
        backward_grads: F8Kind::E5M2,
        ..Self::FP8
    };
    pub const BF16: PrecisionMap = PrecisionMap {
        block_matmuls: BlockPrecision::Bf16,
        backward_grads: F8Kind::E4M3,
        grad_accum: GradAccum::Bf16Stochastic,
    };
    pub const F32: PrecisionMap = PrecisionMap {
        block_matmuls: BlockPrecision::F32,
        backward_grads: F8Kind::E4M3,
        grad_accum: GradAccum::F32,
    };

    /// Storage of activations, activation gradients and logits.
    pub fn storage(&self) -> Storage {
        match self.block_matmuls {
            BlockPrecision::F32 => Storage::F32,
            _ => Storage::Bf16,
        }
    }

    pub fn is_fp8(&self) -> bool {
        self.block_matmuls == BlockPrecision::Fp8E4m3
    }

    pub fn name(&self) -> &'static str {
        match (self.block_matmuls, self.backward_grads) {
            (BlockPrecision::Fp8E4m3, F8Kind::E4M3) => "fp8-e4m3",
            (BlockPrecision::Fp8E4m3, F8Kind::E5M2) => "fp8-e5m2-backward",
            (BlockPrecision::Bf16, _) => "bf16",
            (BlockPrecision::F32, _) => "f32",
        }
    }
}

impl Default for PrecisionMap {
    fn default() -> Self {
        Self::FP8
    }
}

impl fmt::Display for PrecisionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecisionMap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp8" | "fp8-e4m3" => Ok(Self::FP8),
            "fp8-e5m2-backward" | "fp8-e5m2" => Ok(Self::FP8_E5M2_BACKWARD),
            "bf16" => Ok(Self::BF16),
            "f32" => Ok(Self::F32),
            other => Err(format!("unknown precision '{other}' (fp8-e4m3, fp8-e5m2-backward, bf16, f32)")),
        }
    }
}

impl Serialize for PrecisionMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PrecisionMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A recomputation site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    SwiGLU,
    RMSNorm,
    Attention,
    FFN,
    QKV,
    Block,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::SwiGLU, Site::RMSNorm, Site::Attention, Site::FFN, Site::QKV, Site::Block];

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl FromStr for Site {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "swiglu" => Ok(Site::SwiGLU),
            "rmsnorm" | "norm" => Ok(Site::RMSNorm),
            "attention" | "att" | "attn" => Ok(Site::Attention),
            "ffn" => Ok(Site::FFN),
            "qkv" => Ok(Site::QKV),
            "block" => Ok(Site::Block),
            other => Err(format!("unknown recompute site '{other}'")),
        }
    }
}

/// Set of recomputed sites. `Block` implies every other site, and `FFN`
/// (which drops the gate/up output) implies `SwiGLU`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecomputeSet(u8);

impl RecomputeSet {
    pub const NONE: RecomputeSet = RecomputeSet(0);

    pub fn of(sites: &[Site]) -> Self {
        RecomputeSet(sites.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(&self, site: Site) -> bool {
        let mut implied = Site::Block.bit() | site.bit();
        if site == Site::SwiGLU {
            implied |= Site::FFN.bit();
        }
        self.0 & implied != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn with(self, site: Site) -> Self {
        RecomputeSet(self.0 | site.bit())
    }

    pub fn sites(&self) -> Vec<Site> {
        Site::ALL.into_iter().filter(|s| self.0 & s.bit() != 0).collect()
    }

    /// Whether every site recomputed by `self` is also recomputed by `other`.
    pub fn is_subset_of(&self, other: &RecomputeSet) -> bool {
        Site::ALL.iter().all(|&s| !self.contains(s) || other.contains(s))
    }

    /// Levels used by the planner, from least to most recomputation.
    pub fn levels() -> Vec<RecomputeSet> {
        vec![
            Self::NONE,
            Self::of(&[Site::SwiGLU]),
            Self::of(&[Site::SwiGLU, Site::RMSNorm]),
            Self::of(&[Site::FFN, Site::Attention]),
            Self::of(&[Site::QKV, Site::FFN]),
            Self::of(&[Site::QKV, Site::FFN, Site::Attention, Site::RMSNorm]),
            Self::of(&[Site::Block]),
        ]
    }

    pub(crate) fn drops_norm_out(&self) -> bool {
        self.contains(Site::RMSNorm)
    }
    pub(crate) fn drops_qkv(&self) -> bool {
        self.contains(Site::QKV)
    }
    pub(crate) fn drops_attention(&self) -> bool {
        self.contains(Site::Attention)
    }
    pub(crate) fn drops_gate_up(&self) -> bool {
        self.contains(Site::FFN)
    }
    pub(crate) fn drops_swiglu(&self) -> bool {
        self.contains(Site::SwiGLU)
    }
    pub(crate) fn drops_mid_residual(&self) -> bool {
        self.contains(Site::Block)
    }
}

impl fmt::Display for RecomputeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<String> = self.sites().iter().map(|s| format!("{s:?}")).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for RecomputeSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" || s == "-" || s == "---" {
            return Ok(Self::NONE);
        }
        let sites = s.split(',').map(str::parse).collect::<Result<Vec<Site>, _>>()?;
        Ok(Self::of(&sites))
    }
}

impl Serialize for RecomputeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RecomputeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{HardwareProfile, PlanError};
use crate::model::{BlockPrecision, ModelConfig, PrecisionMap, RecomputeSet, Site};

/// Operations per token for one forward and backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub fp8_linear: f64,
    pub bf16_linear: f64,
    pub f32_linear: f64,
    pub bf16_lmhead: f64,
    pub bf16_attention: f64,
    /// Extra forward work from recomputation, in the precision of the
    /// recomputed ops; see `by_precision`.
    pub recompute_linear: f64,
    pub recompute_attention: f64,
    /// Elementwise work; not part of the lower bound.
    pub other: f64,
    #[serde(skip)]
    linear_precision: Option<BlockPrecision>,
}

/// Linear layers cost 6 ops per weight per token (forward 2, backward 4);
/// the LM head likewise with `vocab * d_model` weights. Attention score and
/// value matmuls cost `12 * seq * d_model` per layer per token: two matmuls
/// of `2 * seq * d_model` forward, doubled again for backward.
pub fn flop_breakdown(cfg: &ModelConfig, prec: &PrecisionMap) -> FlopBreakdown {
    let l = cfg.n_layers as f64;
    let d = cfg.d_model as f64;
    let linear = 6.0 * l * cfg.linear_params_per_layer() as f64;
    let mut b = FlopBreakdown {
        bf16_lmhead: 6.0 * cfg.vocab as f64 * d,
        bf16_attention: 12.0 * l * cfg.seq_len as f64 * d,
        other: l * 10.0 * (4.0 * d + cfg.d_ff as f64),
        linear_precision: Some(prec.block_matmuls),
        ..Default::default()
    };
    match prec.block_matmuls {
        BlockPrecision::Fp8E4m3 => b.fp8_linear = linear,
        BlockPrecision::Bf16 => b.bf16_linear = linear,
        BlockPrecision::F32 => b.f32_linear = linear,
    }
    b
}

impl FlopBreakdown {
    /// Adds the forward work repeated in backward for `recompute`.
    pub fn with_recompute(mut self, cfg: &ModelConfig, recompute: RecomputeSet) -> Self {
        let l = cfg.n_layers as f64;
        let d = cfg.d_model as u64;
        let qkv = 2 * d * cfg.qkv_dim() as u64;
        let out = 2 * d * (cfg.n_heads * cfg.head_dim()) as u64;
        let gate_up = 2 * d * cfg.d_ff as u64;
        let down = 2 * d * cfg.ffn_hidden() as u64;
        let mut per_layer = 0u64;
        if recompute.contains(Site::Block) {
            per_layer = qkv + out + gate_up + down;
        } else {
            if recompute.contains(Site::QKV) {
                per_layer += qkv;
            }
            if recompute.contains(Site::FFN) {
                per_layer += gate_up;
            }
        }
        self.recompute_linear = l * per_layer as f64;
        if recompute.contains(Site::Attention) {
            self.recompute_attention = 4.0 * l * cfg.seq_len as f64 * cfg.d_model as f64;
        }
        self
    }

    pub fn total(&self) -> f64 {
        self.fp8_linear
            + self.bf16_linear
            + self.f32_linear
            + self.bf16_lmhead
            + self.bf16_attention
            + self.recompute_linear
            + self.recompute_attention
    }

    /// Matmul ops grouped by the peak rate they run at.
    pub fn by_precision(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        let mut add = |k: &'static str, v: f64| {
            if v > 0.0 {
                *m.entry(k).or_insert(0.0) += v;
            }
        };
        add("fp8", self.fp8_linear);
        add("bf16", self.bf16_linear);
        add("f32", self.f32_linear);
        let side = if self.linear_precision == Some(BlockPrecision::F32) { "f32" } else { "bf16" };
        add(side, self.bf16_lmhead + self.bf16_attention + self.recompute_attention);
        let rec = match self.linear_precision {
            Some(BlockPrecision::Fp8E4m3) => "fp8",
            Some(BlockPrecision::F32) => "f32",
            _ => "bf16",
        };
        add(rec, self.recompute_linear);
        m
    }

    /// Seconds per token at peak rates.
    pub fn lower_bound(&self, hw: &HardwareProfile) -> Result<f64, PlanError> {
        self.by_precision().iter().map(|(p, ops)| Ok(ops / hw.peak(p)?)).sum()
    }

    /// Best-case FP8 speed-up over running the same linear layers in BF16,
    /// with LM head and attention in BF16 either way.
    pub fn speedup_ceiling(&self, hw: &HardwareProfile) -> Result<f64, PlanError> {
        let linear = self.fp8_linear + self.bf16_linear;
        let side = self.bf16_lmhead + self.bf16_attention;
        let bf16 = hw.peak("bf16")?;
        let t_bf16 = (linear + side) / bf16;
        let t_fp8 = linear / hw.peak("fp8")? + side / bf16;
        Ok(t_bf16 / t_fp8 - 1.0)
    }
}

pub fn lower_bound_seconds_per_token(cfg: &ModelConfig, prec: &PrecisionMap, hw: &HardwareProfile) -> Result<f64, PlanError> {
    flop_breakdown(cfg, prec).lower_bound(hw)
}

/// Lower-bound duration over measured duration.
pub fn mfu(measured_tps: f64, cfg: &ModelConfig, prec: &PrecisionMap, hw: &HardwareProfile) -> Result<f64, PlanError> {
    if !(measured_tps > 0.0) {
        return Err(PlanError::NonPositiveThroughput);
    }
    Ok(lower_bound_seconds_per_token(cfg, prec, hw)? * measured_tps)
}

pub fn fp8_speedup_ceiling(cfg: &ModelConfig, hw: &HardwareProfile) -> Result<f64, PlanError> {
    flop_breakdown(cfg, &PrecisionMap::FP8).speedup_ceiling(hw)
}

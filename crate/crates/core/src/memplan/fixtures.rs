//! Reference model shapes and published run configurations.

use crate::model::{ModelConfig, PrecisionMap};

/// Sequence length of the benchmark runs, inferred from the published
/// attention op count for the 7B model.
pub const BENCH_SEQ_LEN: usize = 512;

/// Qwen2.5 family shapes. `d_ff` holds gate and up projections together.
pub fn qwen25(size: &str) -> Option<ModelConfig> {
    let (n_layers, d_model, inter, n_heads, n_kv_heads, vocab, tie) = match size.to_ascii_lowercase().as_str() {
        "0.5b" => (24, 896, 4864, 14, 2, 151_936, true),
        "1.5b" => (28, 1536, 8960, 12, 2, 151_936, true),
        "3b" => (36, 2048, 11008, 16, 2, 151_936, true),
        "7b" => (28, 3584, 18944, 28, 4, 152_064, false),
        "14b" => (48, 5120, 13824, 40, 8, 152_064, false),
        "32b" => (64, 5120, 27648, 40, 8, 152_064, false),
        _ => return None,
    };
    Some(ModelConfig {
        n_layers,
        d_model,
        d_ff: 2 * inter,
        n_heads,
        n_kv_heads,
        vocab,
        seq_len: BENCH_SEQ_LEN,
        tie_embeddings: tie,
    })
}

pub const QWEN_SIZES: [&str; 6] = ["0.5b", "1.5b", "3b", "7b", "14b", "32b"];

/// Exactly 1.5e9 parameters.
pub fn params_1_5b() -> ModelConfig {
    ModelConfig {
        n_layers: 24,
        d_model: 1600,
        d_ff: 17408,
        n_heads: 25,
        n_kv_heads: 25,
        vocab: 157_163,
        seq_len: BENCH_SEQ_LEN,
        tie_embeddings: true,
    }
}

/// 7.0e9 block parameters and no vocabulary, for host-budget arithmetic.
pub fn params_7b_blocks() -> ModelConfig {
    ModelConfig {
        n_layers: 28,
        d_model: 4096,
        d_ff: 29768,
        n_heads: 32,
        n_kv_heads: 32,
        vocab: 0,
        seq_len: BENCH_SEQ_LEN,
        tie_embeddings: false,
    }
}

/// Residual tokens in flight behind the "5 GB of offloaded residuals"
/// figure for [`params_7b_blocks`]: 42 sequences of 512.
pub const HOST_BUDGET_RESIDUAL_TOKENS: usize = 42 * 512;

/// One row of the published single-GPU run configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRun {
    pub gpu: &'static str,
    pub size: &'static str,
    pub precision: PrecisionMap,
    pub micro_batch: usize,
    pub recompute: &'static str,
    pub offload: &'static str,
}

const fn row(
    gpu: &'static str,
    size: &'static str,
    fp8: bool,
    micro_batch: usize,
    recompute: &'static str,
    offload: &'static str,
) -> PublishedRun {
    PublishedRun {
        gpu,
        size,
        precision: if fp8 { PrecisionMap::FP8 } else { PrecisionMap::BF16 },
        micro_batch,
        recompute,
        offload,
    }
}

pub const PUBLISHED_RUNS: [PublishedRun; 18] = [
    row("rtx5060ti", "0.5b", true, 12, "none", "none"),
    row("rtx5060ti", "0.5b", false, 10, "none", "none"),
    row("rtx5060ti", "1.5b", true, 8, "block", "x"),
    row("rtx5060ti", "1.5b", false, 8, "ffn,att", "none"),
    row("rtx5060ti", "3b", true, 12, "block", "m,v,theta*"),
    row("rtx5060ti", "3b", false, 12, "qkv,ffn", "m,v,theta"),
    row("rtx5060ti", "7b", true, 32, "block", "x,m,v,g,theta,theta*"),
    row("rtx5060ti", "7b", false, 32, "block", "x,m,v,g,theta"),
    row("rtx4090", "0.5b", true, 16, "none", "none"),
    row("rtx4090", "0.5b", false, 16, "none", "none"),
    row("rtx4090", "1.5b", true, 4, "none", "none"),
    row("rtx4090", "1.5b", false, 4, "none", "none"),
    row("rtx4090", "3b", true, 4, "none", "m,v,theta*"),
    row("rtx4090", "3b", false, 4, "swiglu", "m,v"),
    row("rtx4090", "7b", true, 16, "block", "m,v,theta*,theta,x"),
    row("rtx4090", "7b", false, 16, "block", "m,v,theta,x"),
    row("rtx4090", "14b", true, 32, "block", "x,m,v,g,theta,theta*"),
    row("rtx4090", "14b", false, 32, "block", "x,m,v,g,theta"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_parameter_counts() {
        assert_eq!(params_1_5b().param_count(), 1_500_000_000);
        assert_eq!(params_7b_blocks().param_count(), 7_000_330_240);
        let q7 = qwen25("7b").unwrap();
        assert_eq!(q7.linear_params_per_layer(), 233_046_016);
        for s in QWEN_SIZES {
            qwen25(s).unwrap().validate().unwrap();
        }
    }
}

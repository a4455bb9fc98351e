use serde::{Deserialize, Serialize};

use super::ModelError;

/// Decoder-only transformer dimensions.
///
/// `d_ff` is the width of the fused gate/up projection; the SwiGLU output
/// (and the down-projection input) is `d_ff / 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Share the embedding table with the LM head.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_kv_heads: 4,
            vocab: 512,
            seq_len: 128,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return bad("layers, d_model and head counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!("n_heads {} not a multiple of n_kv_heads {}", self.n_heads, self.n_kv_heads));
        }
        if self.d_ff == 0 || self.d_ff % 2 != 0 {
            return bad(format!("d_ff {} must be even", self.d_ff));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_ff / 2
    }

    pub fn qkv_dim(&self) -> usize {
        (self.n_heads + 2 * self.n_kv_heads) * self.head_dim()
    }

    /// Weights of the four projection matrices in one block.
    pub fn linear_params_per_layer(&self) -> u64 {
        let d = self.d_model as u64;
        let attn = d * self.qkv_dim() as u64 + (self.n_heads * self.head_dim()) as u64 * d;
        let ffn = d * self.d_ff as u64 + self.ffn_hidden() as u64 * d;
        attn + ffn
    }

    pub fn params_per_layer(&self) -> u64 {
        self.linear_params_per_layer() + 2 * self.d_model as u64
    }

    pub fn block_params(&self) -> u64 {
        self.n_layers as u64 * self.params_per_layer()
    }

    /// Embedding, LM head (unless tied) and the final norm.
    pub fn replicated_params(&self) -> u64 {
        let table = (self.vocab * self.d_model) as u64;
        let tables = if self.tie_embeddings { table } else { 2 * table };
        tables + self.d_model as u64
    }

    pub fn param_count(&self) -> u64 {
        self.block_params() + self.replicated_params()
    }
}

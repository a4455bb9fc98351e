use serde::{Deserialize, Serialize};

use super::{GradAccum, ModelConfig, ModelError};
use crate::numerics::{rng_normal, round_bf16, sr_bf16, stream_id, RngKey};
use crate::tensorops::Tensor;

/// Weights of one transformer block, laid out `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1: Tensor,
    /// Fused q, k, v projection: `[(H + 2 Hkv) * Dh, d]`.
    pub wqkv: Tensor,
    pub wo: Tensor,
    pub ln2: Tensor,
    /// Fused gate/up projection: `[d_ff, d]`, gate rows first.
    pub wgu: Tensor,
    pub wd: Tensor,
}

/// All model parameters. Also used as the gradient-buffer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f: Tensor,
    /// `None` when tied to the embedding.
    pub lm_head: Option<Tensor>,
}

const LAYER_FIELDS: [&str; 6] = ["ln1", "wqkv", "wo", "ln2", "wgu", "wd"];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 6] {
        [&self.ln1, &self.wqkv, &self.wo, &self.ln2, &self.wgu, &self.wd]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.ln1, &mut self.wqkv, &mut self.wo, &mut self.ln2, &mut self.wgu, &mut self.wd]
    }
}

impl Params {
    /// Zero tensors with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, v) = (cfg.d_model, cfg.vocab);
        let layer = LayerParams {
            ln1: Tensor::zeros(&[d]),
            wqkv: Tensor::zeros(&[cfg.qkv_dim(), d]),
            wo: Tensor::zeros(&[d, cfg.n_heads * cfg.head_dim()]),
            ln2: Tensor::zeros(&[d]),
            wgu: Tensor::zeros(&[cfg.d_ff, d]),
            wd: Tensor::zeros(&[d, cfg.ffn_hidden()]),
        };
        Params {
            embed: Tensor::zeros(&[v, d]),
            layers: vec![layer; cfg.n_layers],
            ln_f: Tensor::zeros(&[d]),
            lm_head: (!cfg.tie_embeddings).then(|| Tensor::zeros(&[v, d])),
        }
    }

    /// Seeded initialization, rounded to BF16.
    ///
    /// Norm gains start at one, the embedding is unit normal, and every
    /// projection (including the LM head) is normal with std `d_model^-1/2`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let proj_std = (cfg.d_model as f32).powf(-0.5);
        for (name, t) in p.named_mut() {
            let std = if name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f" {
                t.data.fill(1.0);
                continue;
            } else if name == "embed" {
                1.0
            } else {
                proj_std
            };
            let key = RngKey::new(seed, stream_id(&format!("init.{name}")), 0);
            for (i, x) in t.data.iter_mut().enumerate() {
                *x = round_bf16(std * rng_normal(key.with_counter(i as u64)));
            }
        }
        Ok(p)
    }

    /// Parameters in a fixed order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{f}"), t));
            }
        }
        out.push(("ln_f".to_string(), &self.ln_f));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((format!("layers.{l}.{f}"), t));
            }
        }
        out.push(("ln_f".to_string(), &mut self.ln_f));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    /// Weights the LM head multiplies with.
    pub fn lm_weight(&self) -> &Tensor {
        self.lm_head.as_ref().unwrap_or(&self.embed)
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self, ModelError> {
        let mut p = Self::zeros(cfg);
        for (name, slot) in p.named_mut() {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape != slot.shape {
                return Err(ModelError::InvalidConfig(format!(
                    "{name}: shape {:?} does not match config {:?}",
                    t.shape, slot.shape
                )));
            }
            slot.data.clone_from(&t.data);
        }
        Ok(p)
    }
}

/// Whether a parameter lives in a transformer block (and so may be sharded
/// or offloaded). Embedding, final norm and LM head are always replicated.
pub fn is_block_param(name: &str) -> bool {
    name.starts_with("layers.")
}

/// Context for one accumulation into the gradient buffers.
///
/// `index` counts micro-batches over the whole run, so every add draws
/// fresh random bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumCtx {
    pub seed: u64,
    pub index: u64,
    pub mode: GradAccum,
}

impl AccumCtx {
    pub fn f32() -> Self {
        Self { seed: 0, index: 0, mode: GradAccum::F32 }
    }

    /// `buf += g`, rounding each element stochastically in BF16 mode.
    pub(crate) fn add(&self, name: &str, buf: &mut Tensor, g: &Tensor) {
        debug_assert_eq!(buf.shape, g.shape, "{name}");
        match self.mode {
            GradAccum::F32 => {
                for (b, &x) in buf.data.iter_mut().zip(&g.data) {
                    *b += x;
                }
            }
            GradAccum::Bf16Stochastic => {
                let len = buf.len() as u64;
                let key = RngKey::new(self.seed, stream_id(&format!("grad.{name}")), 0);
                for (i, (b, &x)) in buf.data.iter_mut().zip(&g.data).enumerate() {
                    *b = sr_bf16(*b + x, key.with_counter(self.index * len + i as u64));
                }
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::numerics::{round_bf16, sr_bf16, stream_id, RngKey};
use crate::tensorops::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPrecision {
    F32,
    Bf16,
}

impl MomentPrecision {
    /// Bytes for both moments of one parameter.
    pub fn bytes_per_param(self) -> u64 {
        match self {
            MomentPrecision::F32 => 8,
            MomentPrecision::Bf16 => 4,
        }
    }
}

/// BF16 is the training configuration; F32 exists to compare against
/// high-precision references without master-weight rounding noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterPrecision {
    Bf16,
    F32,
}

impl MasterPrecision {
    pub fn bytes_per_param(self) -> u64 {
        match self {
            MasterPrecision::Bf16 => 2,
            MasterPrecision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub moments: MomentPrecision,
    pub master: MasterPrecision,
    pub seed: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            moments: MomentPrecision::Bf16,
            master: MasterPrecision::Bf16,
            seed: 0,
        }
    }
}

/// State of one parameter, or of one worker's slice of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub name: String,
    /// Length of the whole parameter; RNG counters index into it.
    pub full_len: usize,
    /// First element of this slice within the parameter.
    pub offset: usize,
    pub master: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl ParamState {
    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub params: Vec<ParamState>,
}

fn store_master(cfg: &AdamWConfig, x: f32, key: RngKey) -> f32 {
    match cfg.master {
        MasterPrecision::F32 => x,
        MasterPrecision::Bf16 => sr_bf16(x, key),
    }
}

fn store_moment(cfg: &AdamWConfig, x: f32, key: RngKey) -> f32 {
    match cfg.moments {
        MomentPrecision::F32 => x,
        MomentPrecision::Bf16 => sr_bf16(x, key),
    }
}

impl OptimState {
    /// Fresh state over whole parameters. BF16 masters start from the
    /// nearest BF16 value.
    pub fn new(cfg: AdamWConfig, params: &[(String, &[f32])]) -> Self {
        let params = params
            .iter()
            .map(|(name, p)| Self::slice_state(&cfg, name, p, 0, p.len()))
            .collect();
        Self { cfg, step: 0, params }
    }

    pub(crate) fn slice_state(cfg: &AdamWConfig, name: &str, full: &[f32], start: usize, end: usize) -> ParamState {
        let master = full[start..end]
            .iter()
            .map(|&x| match cfg.master {
                MasterPrecision::Bf16 => round_bf16(x),
                MasterPrecision::F32 => x,
            })
            .collect();
        ParamState {
            name: name.to_string(),
            full_len: full.len(),
            offset: start,
            master,
            m: vec![0.0; end - start],
            v: vec![0.0; end - start],
        }
    }

    pub fn bytes(&self) -> u64 {
        let per = self.cfg.moments.bytes_per_param() + self.cfg.master.bytes_per_param();
        self.params.iter().map(|p| p.len() as u64 * per).sum()
    }

    pub fn master(&self, name: &str) -> Option<&[f32]> {
        self.params.iter().find(|p| p.name == name).map(|p| p.master.as_slice())
    }

    /// One AdamW step. `grads[k]` matches `params[k]` (this slice only);
    /// every gradient is multiplied by `grad_scale` first, which is how
    /// clipping is applied.
    pub fn step(&mut self, grads: &[&[f32]], grad_scale: f32) -> Result<(), OptimError> {
        if grads.len() != self.params.len() {
            return Err(OptimError::TensorCount { expected: self.params.len(), got: grads.len() });
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.len() != p.len() {
                return Err(OptimError::ShapeMismatch { param: p.name.clone(), expected: p.len(), got: g.len() });
            }
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient { param: p.name.clone(), index: p.offset + index });
            }
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.cfg;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t as i32) as f32;
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t as i32) as f32;
        for (p, g) in self.params.iter_mut().zip(grads) {
            let keys = [
                RngKey::new(cfg.seed, stream_id(&format!("{}.m", p.name)), 0),
                RngKey::new(cfg.seed, stream_id(&format!("{}.v", p.name)), 0),
                RngKey::new(cfg.seed, stream_id(&format!("{}.master", p.name)), 0),
            ];
            let base = t * p.full_len as u64 + p.offset as u64;
            for i in 0..p.len() {
                let counter = base + i as u64;
                let gi = g[i] * grad_scale;
                let m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * p.master[i];
                let theta = p.master[i] - cfg.lr * update;
                p.m[i] = store_moment(&cfg, m, keys[0].with_counter(counter));
                p.v[i] = store_moment(&cfg, v, keys[1].with_counter(counter));
                p.master[i] = store_master(&cfg, theta, keys[2].with_counter(counter));
            }
        }
        Ok(())
    }

    /// Tensors for checkpointing, named `optim.{param}.{master|m|v}`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in &self.params {
            for (field, data) in [("master", &p.master), ("m", &p.m), ("v", &p.v)] {
                out.push((format!("optim.{}.{field}", p.name), Tensor { shape: vec![data.len()], data: data.clone() }));
            }
        }
        out
    }

    /// Restores master and moments saved by `named_tensors`.
    pub fn load_named(&mut self, step: u64, tensors: &[(String, Tensor)]) -> Result<(), OptimError> {
        for p in &mut self.params {
            for field in ["master", "m", "v"] {
                let key = format!("optim.{}.{field}", p.name);
                let t = tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| OptimError::MissingState(key.clone()))?;
                let dst = match field {
                    "master" => &mut p.master,
                    "m" => &mut p.m,
                    _ => &mut p.v,
                };
                if t.data.len() != dst.len() {
                    return Err(OptimError::ShapeMismatch { param: key, expected: dst.len(), got: t.data.len() });
                }
                dst.copy_from_slice(&t.data);
            }
        }
        self.step = step;
        Ok(())
    }
}

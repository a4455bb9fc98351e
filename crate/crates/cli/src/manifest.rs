//! Run manifest: everything a training run depends on, in one TOML file.
//!
//! ```toml
//! seed = 1
//! workers = 1
//! hardware = "rtx4090"
//!
//! [model]            # ModelConfig fields; omitted ones take the toy values
//! n_layers = 2
//!
//! [plan]             # RunPlan fields
//! micro_batch = 4
//! precision = "fp8-e4m3"
//! recompute = "swiglu"
//!
//! [optim]            # AdamW hyperparameters
//! lr = 3e-3
//!
//! [train]
//! steps = 500
//!
//! [data]
//! n_sequences = 64
//!
//! [output]
//! metrics = "metrics.csv"
//! checkpoint = "final.qtc"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qtrain_core::memplan::{HardwareProfile, RunPlan};
use qtrain_core::model::{CorpusSpec, ModelConfig};
use qtrain_core::optim::AdamWConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Simulated data-parallel workers.
    pub workers: usize,
    /// Built-in profile name, or a path to a profile TOML.
    pub hardware: String,
    pub model: ModelConfig,
    pub plan: RunPlan,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Clip the global gradient norm to this value.
    pub max_grad_norm: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    /// Validation loss every this many steps (and at the last one).
    pub eval_every: u64,
    /// Query rows per attention chunk.
    pub attn_chunk: usize,
    /// Tokens per cross-entropy chunk.
    pub ce_chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_sequences: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Sequences in the validation batch.
    pub val_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub metrics: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 1,
            hardware: "rtx4090".into(),
            model: ModelConfig { seq_len: 64, ..ModelConfig::toy() },
            plan: RunPlan { micro_batch: 4, ..RunPlan::default() },
            optim: OptimSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self { lr: 3e-3, beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: 0.0, max_grad_norm: Some(1.0) }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 500, eval_every: 25, attn_chunk: 64, ce_chunk: 256 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_sequences: 64, seed: None, val_sequences: 8 }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { metrics: "metrics.csv".into(), checkpoint: Some("checkpoint.qtc".into()) }
    }
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).context("parsing manifest")?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for w in self.plan.validate(self.workers)? {
            eprintln!("warning: {w}");
        }
        if self.train.steps == 0 {
            bail!("train.steps must be positive");
        }
        if self.train.eval_every == 0 || self.train.attn_chunk == 0 || self.train.ce_chunk == 0 {
            bail!("train.eval_every, attn_chunk and ce_chunk must be positive");
        }
        if self.data.n_sequences == 0 || self.data.val_sequences == 0 {
            bail!("data.n_sequences and data.val_sequences must be positive");
        }
        if !(self.optim.lr > 0.0) {
            bail!("optim.lr must be positive");
        }
        Ok(())
    }

    pub fn hardware_profile(&self) -> Result<HardwareProfile> {
        load_profile(&self.hardware)
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec { vocab: self.model.vocab, n_sequences: self.data.n_sequences, seed: self.data.seed.unwrap_or(self.seed) }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
            moments: self.plan.moments,
            seed: self.seed,
            ..AdamWConfig::default()
        }
    }
}

/// A built-in profile by name, or a profile TOML file.
pub fn load_profile(name: &str) -> Result<HardwareProfile> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "toml") && path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(HardwareProfile::from_toml(&text)?);
    }
    Ok(HardwareProfile::builtin(name)?)
}

//! Toy-scale training loop over simulated data-parallel workers.
//!
//! Per optimizer step every worker accumulates `ga_steps` micro-batches into
//! its own gradient buffers; with more than one worker the buffers are
//! combined by the copy-based reduce-scatter, each worker steps its optimizer
//! shard, and the updated weights are all-gathered.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use qtrain_core::comms::{reduce_scatter_copy, Executor, RsConfig, RsRounding};
use qtrain_core::memplan::estimate_step_time;
use qtrain_core::model::{
    decode_checkpoint, encode_checkpoint, forward, forward_backward, AccumCtx, Batch, GradAccum, ModelConfig, Params,
    RunOptions, SyntheticCorpus,
};
use qtrain_core::optim::{clip_coefficient, global_grad_norm, global_grad_norm_sharded, shard_range, GradInput, ShardedOptimizer};
use qtrain_core::tensorops::Tensor;

use crate::manifest::RunManifest;

pub const CSV_HEADER: &str = "step,tokens,train_loss,val_loss,grad_norm,simulated_time";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub tokens: u64,
    pub train_loss: f32,
    /// Only on evaluation steps.
    pub val_loss: Option<f32>,
    pub grad_norm: f32,
    /// Planner estimate of wall-clock seconds on the manifest's hardware.
    pub simulated_time: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.tokens, self.train_loss, val, self.grad_norm, self.simulated_time
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            bail!("expected 6 fields, got {}: '{line}'", f.len());
        }
        Ok(Self {
            step: f[0].parse()?,
            tokens: f[1].parse()?,
            train_loss: f[2].parse()?,
            val_loss: if f[3].is_empty() { None } else { Some(f[3].parse()?) },
            grad_norm: f[4].parse()?,
            simulated_time: f[5].parse()?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_line()).unwrap();
    }
    out
}

pub struct Trainer {
    manifest: RunManifest,
    corpus: SyntheticCorpus,
    opts: RunOptions,
    params: Params,
    optim: ShardedOptimizer,
    val: Batch,
    step: u64,
    step_seconds: f64,
}

impl Trainer {
    pub fn new(manifest: &RunManifest) -> Result<Self> {
        manifest.validate()?;
        let cfg = &manifest.model;
        let params = Params::init(cfg, manifest.seed)?;
        let named: Vec<(String, &[f32])> = params.named().into_iter().map(|(n, t)| (n, t.data.as_slice())).collect();
        let optim = ShardedOptimizer::new(manifest.adamw(), &named, manifest.workers);
        let corpus = SyntheticCorpus::new(manifest.corpus());
        let val = corpus.val_batch(manifest.data.val_sequences, cfg.seq_len);
        let hw = manifest.hardware_profile()?;
        let step_seconds = estimate_step_time(cfg, &manifest.plan, &hw, manifest.workers)?.total;
        let opts = RunOptions {
            recompute: manifest.plan.recompute,
            precision: manifest.plan.precision,
            attn_chunk: manifest.train.attn_chunk,
            ce_chunk: manifest.train.ce_chunk,
        };
        Ok(Self { manifest: manifest.clone(), corpus, opts, params, optim, val, step: 0, step_seconds })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn tokens_per_step(&self) -> u64 {
        let p = &self.manifest.plan;
        (self.manifest.workers * p.ga_steps * p.micro_batch * self.manifest.model.seq_len) as u64
    }

    pub fn validation_loss(&self) -> Result<f32> {
        let (loss, _) = forward(&self.manifest.model, &self.params, &self.val, &self.opts)?;
        Ok(loss)
    }

    /// One optimizer step. Fails on any non-finite loss or gradient.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let m = &self.manifest;
        let cfg: &ModelConfig = &m.model;
        let (w, ga, mb) = (m.workers, m.plan.ga_steps, m.plan.micro_batch);
        let scale = 1.0 / (w * ga) as f32;
        let mode = m.plan.precision.grad_accum;
        let mut loss_sum = 0.0f64;
        let mut worker_grads = Vec::with_capacity(w);
        for wi in 0..w {
            let mut g = Params::zeros(cfg);
            for a in 0..ga {
                let micro = (self.step * ga as u64 + a as u64) * w as u64 + wi as u64;
                let batch = self.corpus.train_batch(micro, mb, cfg.seq_len);
                let accum = AccumCtx { seed: m.seed, index: micro, mode };
                let loss = forward_backward(cfg, &self.params, &batch, &self.opts, &mut g, accum, scale)
                    .with_context(|| format!("step {} worker {wi} micro-batch {a}", self.step + 1))?;
                if !loss.is_finite() {
                    bail!("non-finite loss {loss} at step {} (worker {wi}, micro-batch {a})", self.step + 1);
                }
                loss_sum += loss as f64;
            }
            worker_grads.push(g);
        }
        let train_loss = (loss_sum / (w * ga) as f64) as f32;

        let max_norm = m.optim.max_grad_norm;
        let (grad_norm, gathered) = if w == 1 {
            let named = worker_grads[0].named();
            let full: Vec<&[f32]> = named.iter().map(|(_, t)| t.data.as_slice()).collect();
            let norm = global_grad_norm(&full);
            check_norm(norm, self.step + 1)?;
            (norm, self.optim.step(GradInput::Replicated(&full), clip_coefficient(norm, max_norm))?)
        } else {
            let shards = self.reduce_scatter(&worker_grads)?;
            let views: Vec<Vec<&[f32]>> = shards.iter().map(|s| s.iter().map(Vec::as_slice).collect()).collect();
            let norm = global_grad_norm_sharded(&views);
            check_norm(norm, self.step + 1)?;
            (norm, self.optim.step(GradInput::Scattered(&views), clip_coefficient(norm, max_norm))?)
        };
        for ((_, dst), src) in self.params.named_mut().into_iter().zip(&gathered[0]) {
            dst.data.copy_from_slice(src);
        }
        self.step += 1;

        let eval = self.step % m.train.eval_every == 0 || self.step == m.train.steps;
        let val_loss = if eval { Some(self.validation_loss()?) } else { None };
        Ok(MetricsRow {
            step: self.step,
            tokens: self.step * self.tokens_per_step(),
            train_loss,
            val_loss,
            grad_norm,
            simulated_time: self.step as f64 * self.step_seconds,
        })
    }

    /// `[worker][tensor]` gradient slices, each worker owning the
    /// `shard_range` of every tensor.
    fn reduce_scatter(&self, worker_grads: &[Params]) -> Result<Vec<Vec<Vec<f32>>>> {
        let w = worker_grads.len();
        let named: Vec<Vec<(String, &Tensor)>> = worker_grads.iter().map(Params::named).collect();
        let rounding = match self.manifest.plan.precision.grad_accum {
            GradAccum::Bf16Stochastic => RsRounding::StochasticBf16,
            GradAccum::F32 => RsRounding::F32,
        };
        let mut out = vec![Vec::with_capacity(named[0].len()); w];
        for k in 0..named[0].len() {
            let len = named[0][k].1.len();
            let per = len.div_ceil(w);
            let chunks: Vec<Vec<Vec<f32>>> = named
                .iter()
                .map(|g| {
                    let mut data = g[k].1.data.clone();
                    data.resize(per * w, 0.0);
                    data.chunks(per.max(1)).map(<[f32]>::to_vec).take(w).collect()
                })
                .collect();
            let cfg = RsConfig { seed: self.manifest.seed, step: self.step, layer: k as u64, rounding, pieces: 1 };
            let rs = reduce_scatter_copy(chunks, vec![vec![0.0; per]; w], &cfg, Executor::Sequential)?;
            for (wi, mut shard) in rs.shards.into_iter().enumerate() {
                shard.truncate(shard_range(len, w, wi).len());
                out[wi].push(shard);
            }
        }
        Ok(out)
    }

    /// Weights, every worker's optimizer slice, and the step counter.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (wi, state) in self.optim.workers.iter().enumerate() {
            for (name, t) in state.named_tensors() {
                owned.push((format!("worker{wi}.{name}"), t));
            }
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.named();
        tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
        let mut manifest = self.manifest.clone();
        manifest.output = Default::default();
        let meta = serde_json::json!({
            "step": self.step,
            "tokens": self.step * self.tokens_per_step(),
            "manifest": manifest,
        });
        Ok(encode_checkpoint(&tensors, meta)?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?).with_context(|| format!("writing {}", path.display()))
    }

    /// Continues a run from `checkpoint_bytes` output of the same manifest.
    pub fn resume(manifest: &RunManifest, bytes: &[u8]) -> Result<Self> {
        let mut t = Self::new(manifest)?;
        let (tensors, meta) = decode_checkpoint(bytes)?;
        let step = meta["step"].as_u64().context("checkpoint meta has no step")?;
        let (weights, rest): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| !n.starts_with("worker"));
        t.params = Params::from_named(&manifest.model, &weights)?;
        for (wi, state) in t.optim.workers.iter_mut().enumerate() {
            let prefix = format!("worker{wi}.");
            let mine: Vec<(String, Tensor)> = rest
                .iter()
                .filter_map(|(n, x)| n.strip_prefix(&prefix).map(|s| (s.to_string(), x.clone())))
                .collect();
            state.load_named(step, &mine)?;
        }
        t.step = step;
        Ok(t)
    }
}

fn check_norm(norm: f32, step: u64) -> Result<()> {
    if !norm.is_finite() {
        bail!("non-finite gradient norm at step {step}");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Vec<u8>,
}

impl TrainOutcome {
    pub fn csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn initial_loss(&self) -> f32 {
        self.rows.first().map_or(f32::NAN, |r| r.train_loss)
    }

    pub fn final_loss(&self) -> f32 {
        self.rows.last().map_or(f32::NAN, |r| r.train_loss)
    }
}

/// Runs the manifest's steps in memory; `on_row` sees every row as it is
/// produced.
pub fn run(manifest: &RunManifest, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    let mut t = Trainer::new(manifest)?;
    let mut rows = Vec::with_capacity(manifest.train.steps as usize);
    while t.step_count() < manifest.train.steps {
        let row = t.step()?;
        on_row(&row);
        rows.push(row);
    }
    Ok(TrainOutcome { rows, checkpoint: t.checkpoint_bytes()? })
}

//! Synthetic, memorizable token corpus.
//!
//! A seeded random permutation `pi` of the vocabulary defines the chain
//! `t -> pi(t)`; every sequence starts at a seeded random token and follows
//! the chain. The next token is a deterministic function of the current
//! one, so a model can drive the loss towards zero.

use serde::{Deserialize, Serialize};

use super::Batch;
use crate::numerics::{rng_uniform, stream_id, RngKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    /// Distinct training sequences; batches cycle through them.
    pub n_sequences: usize,
    pub seed: u64,
}

pub struct SyntheticCorpus {
    spec: CorpusSpec,
    perm: Vec<u32>,
}

impl SyntheticCorpus {
    pub fn new(spec: CorpusSpec) -> Self {
        let key = RngKey::new(spec.seed, stream_id("corpus.perm"), 0);
        let mut perm: Vec<u32> = (0..spec.vocab as u32).collect();
        for i in (1..perm.len()).rev() {
            let j = (rng_uniform(key.with_counter(i as u64)) as u64 * (i as u64 + 1) >> 32) as usize;
            perm.swap(i, j);
        }
        Self { spec, perm }
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn next_token(&self, t: u32) -> u32 {
        self.perm[t as usize]
    }

    fn start(&self, split: &str, index: u64) -> u32 {
        let key = RngKey::new(self.spec.seed, stream_id(&format!("corpus.{split}")), index);
        ((rng_uniform(key) as u64 * self.spec.vocab as u64) >> 32) as u32
    }

    fn sequence(&self, start: u32, seq: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(seq + 1);
        let mut t = start;
        for _ in 0..=seq {
            out.push(t);
            t = self.next_token(t);
        }
        out
    }

    fn make_batch(&self, starts: impl Iterator<Item = u32>, batch: usize, seq: usize) -> Batch {
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for s in starts.take(batch) {
            let full = self.sequence(s, seq);
            inputs.extend_from_slice(&full[..seq]);
            targets.extend_from_slice(&full[1..]);
        }
        Batch { inputs, targets, batch, seq }
    }

    /// Training batch number `index`, cycling through the fixed sequences.
    pub fn train_batch(&self, index: u64, batch: usize, seq: usize) -> Batch {
        let n = self.spec.n_sequences.max(1) as u64;
        let starts = (0..batch as u64).map(|b| self.start("train", (index * batch as u64 + b) % n));
        self.make_batch(starts, batch, seq)
    }

    /// Held-out batch drawn from different start tokens.
    pub fn val_batch(&self, batch: usize, seq: usize) -> Batch {
        self.make_batch((0..batch as u64).map(|b| self.start("val", b)), batch, seq)
    }
}

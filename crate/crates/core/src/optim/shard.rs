use super::{OptimError, OptimState};
use crate::comms::all_gather_copy;

/// Slice of a `len`-element parameter owned by `worker`: each worker owns
/// `ceil(len / W)` elements of the zero-padded parameter, clipped to `len`.
pub fn shard_range(len: usize, workers: usize, worker: usize) -> std::ops::Range<usize> {
    let per = len.div_ceil(workers);
    (worker * per).min(len)..((worker + 1) * per).min(len)
}

/// Gradients handed to a sharded step.
pub enum GradInput<'a> {
    /// Every worker holds the full reduced gradient (`[tensor]`).
    Replicated(&'a [&'a [f32]]),
    /// Each worker holds only its slice (`[worker][tensor]`), as produced by
    /// a reduce-scatter.
    Scattered(&'a [Vec<&'a [f32]>]),
}

/// One optimizer state slice per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedOptimizer {
    pub workers: Vec<OptimState>,
}

impl ShardedOptimizer {
    pub fn new(cfg: super::AdamWConfig, params: &[(String, &[f32])], workers: usize) -> Self {
        let workers = (0..workers)
            .map(|w| OptimState {
                cfg,
                step: 0,
                params: params
                    .iter()
                    .map(|(name, p)| {
                        let r = shard_range(p.len(), workers, w);
                        OptimState::slice_state(&cfg, name, p, r.start, r.end)
                    })
                    .collect(),
            })
            .collect();
        Self { workers }
    }

    pub fn bytes_per_worker(&self) -> Vec<u64> {
        self.workers.iter().map(OptimState::bytes).collect()
    }

    /// Every worker updates its slice, then the padded slices are
    /// all-gathered. Returns `[worker][tensor]` full parameters.
    pub fn step(&mut self, grads: GradInput<'_>, grad_scale: f32) -> Result<Vec<Vec<Vec<f32>>>, OptimError> {
        let w = self.workers.len();
        for (wi, state) in self.workers.iter_mut().enumerate() {
            let slices: Vec<&[f32]> = match &grads {
                GradInput::Replicated(full) => {
                    if full.len() != state.params.len() {
                        return Err(OptimError::TensorCount { expected: state.params.len(), got: full.len() });
                    }
                    full.iter()
                        .zip(&state.params)
                        .map(|(g, p)| {
                            if g.len() != p.full_len {
                                return Err(OptimError::ShapeMismatch {
                                    param: p.name.clone(),
                                    expected: p.full_len,
                                    got: g.len(),
                                });
                            }
                            Ok(&g[p.offset..p.offset + p.len()])
                        })
                        .collect::<Result<_, _>>()?
                }
                GradInput::Scattered(per_worker) => {
                    if per_worker.len() != w {
                        return Err(OptimError::ShardMisaligned(format!("{} gradient shards for {w} workers", per_worker.len())));
                    }
                    for (g, p) in per_worker[wi].iter().zip(&state.params) {
                        if g.len() != p.len() {
                            return Err(OptimError::ShardMisaligned(format!(
                                "worker {wi} {}: slice of {} elements, owns {}",
                                p.name,
                                g.len(),
                                p.len()
                            )));
                        }
                    }
                    per_worker[wi].clone()
                }
            };
            state.step(&slices, grad_scale)?;
        }
        let n = self.workers[0].params.len();
        let mut out = vec![Vec::with_capacity(n); w];
        for k in 0..n {
            let full_len = self.workers[0].params[k].full_len;
            let per = full_len.div_ceil(w);
            let padded: Vec<Vec<f32>> = self
                .workers
                .iter()
                .map(|s| {
                    let mut v = s.params[k].master.clone();
                    v.resize(per, 0.0);
                    v
                })
                .collect();
            for (dst, mut full) in out.iter_mut().zip(all_gather_copy(&padded)?) {
                full.truncate(full_len);
                dst.push(full);
            }
        }
        Ok(out)
    }
}

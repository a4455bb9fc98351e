use std::sync::{Barrier, Mutex};

use serde::{Deserialize, Serialize};

use super::CommsError;
use crate::numerics::{f8_decode, rng_uniform, sr_bf16, stream_id, F8Kind, RngKey, ScaledQuant};

/// Every worker receives the concatenation of all shards in shard order.
/// Pure data movement.
pub fn all_gather_copy<T: Clone>(shards: &[Vec<T>]) -> Result<Vec<Vec<T>>, CommsError> {
    let len = shards.first().map_or(0, Vec::len);
    for (worker, s) in shards.iter().enumerate() {
        if s.len() != len {
            return Err(CommsError::SizeMismatch { worker, expected: len, got: s.len() });
        }
    }
    let mut out = vec![Vec::with_capacity(len * shards.len()); shards.len()];
    for dst in out.iter_mut() {
        for s in shards {
            dst.extend_from_slice(s);
        }
    }
    Ok(out)
}

/// FP8 shards gathered as raw codes plus one scale per shard.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredFp8 {
    pub kind: F8Kind,
    pub shard_len: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
}

impl GatheredFp8 {
    pub fn decode(&self) -> Vec<f32> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| f8_decode(c, self.kind) / self.scales[i / self.shard_len.max(1)])
            .collect()
    }
}

pub fn all_gather_fp8(shards: &[ScaledQuant]) -> Result<Vec<GatheredFp8>, CommsError> {
    let kind = shards.first().map_or(F8Kind::E4M3, |s| s.kind);
    if let Some(worker) = shards.iter().position(|s| s.kind != kind) {
        return Err(CommsError::Protocol(format!("worker {worker} uses a different FP8 kind")));
    }
    let codes: Vec<Vec<u8>> = shards.iter().map(|s| s.codes.clone()).collect();
    let scales: Vec<Vec<f32>> = shards.iter().map(|s| vec![s.scale]).collect();
    let codes = all_gather_copy(&codes)?;
    let scales = all_gather_copy(&scales)?;
    let shard_len = shards.first().map_or(0, |s| s.codes.len());
    Ok(codes
        .into_iter()
        .zip(scales)
        .map(|(codes, scales)| GatheredFp8 { kind, shard_len, codes, scales })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RsRounding {
    /// Accumulator lives in BF16; every add rounds stochastically.
    StochasticBf16,
    /// Plain f32 adds.
    F32,
}

/// How the per-worker programs are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    /// Workers in index order, one op at a time.
    Sequential,
    /// Single context; the next worker to step is drawn from a seeded RNG.
    RandomInterleaving { seed: u64 },
    /// One OS thread per worker with real barriers.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsConfig {
    pub seed: u64,
    pub step: u64,
    pub layer: u64,
    pub rounding: RsRounding,
    /// Sub-operations each copy or add is split into, so interleavings can
    /// cut through the middle of a transfer.
    pub pieces: usize,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self { seed: 0, step: 0, layer: 0, rounding: RsRounding::StochasticBf16, pieces: 2 }
    }
}

/// Structural record of one reduce-scatter run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    pub rounds: usize,
    /// Free chunks per worker, sampled after the local add and after each
    /// copy round.
    pub free_chunks: Vec<Vec<usize>>,
    /// Element adds counted between the end of the local add and the start
    /// of the final reduction.
    pub adds_during_copies: u64,
    pub total_adds: u64,
    /// Chunk copies per worker.
    pub copies: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReduceScatterOut {
    /// Shard `i` ends on worker `i`.
    pub shards: Vec<Vec<f32>>,
    pub audit: ProtocolAudit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Holding,
    Free,
    Received { from: usize },
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Add own chunk `i` into the accumulator.
    LocalAdd { piece: usize },
    /// Copy own chunk `src_slot` into `dst_slot` of worker `dst`.
    Send { round: usize, src_slot: usize, dst: usize, dst_slot: usize, piece: usize },
    Barrier(usize),
    /// Add the chunk received in `round` (from `from`) into the accumulator.
    Reduce { slot: usize, from: usize, piece: usize },
}

/// Op program of worker `i`.
fn program(i: usize, w: usize, pieces: usize) -> Vec<Op> {
    let mut ops: Vec<Op> = (0..pieces).map(|piece| Op::LocalAdd { piece }).collect();
    ops.push(Op::Barrier(0));
    for r in 1..w {
        let dst = (i + r) % w;
        for piece in 0..pieces {
            // receiver `dst` takes round-r data into its slot dst + r - 1
            ops.push(Op::Send { round: r, src_slot: dst, dst, dst_slot: (dst + r - 1) % w, piece });
        }
        ops.push(Op::Barrier(r));
    }
    for r in 1..w {
        for piece in 0..pieces {
            ops.push(Op::Reduce { slot: (i + r - 1) % w, from: (i + w - r) % w, piece });
        }
    }
    ops
}

fn piece_range(len: usize, pieces: usize, piece: usize) -> std::ops::Range<usize> {
    let step = len.div_ceil(pieces.max(1));
    (piece * step).min(len)..((piece + 1) * step).min(len)
}

struct Ctx<'a> {
    cfg: &'a RsConfig,
    len: usize,
}

impl Ctx<'_> {
    fn add(&self, acc: &mut [f32], src: &[f32], target: usize, source: usize, range: std::ops::Range<usize>) {
        let key = RngKey::new(
            self.cfg.seed,
            stream_id(&format!("reduce_scatter.{}.{}", self.cfg.layer, source)),
            0,
        );
        let base = self.cfg.step * (self.len as u64 * 1024) + (target * self.len) as u64;
        for e in range {
            let s = acc[e] + src[e];
            acc[e] = match self.cfg.rounding {
                RsRounding::F32 => s,
                RsRounding::StochasticBf16 => sr_bf16(s, key.with_counter(base + e as u64)),
            };
        }
    }
}

fn validate(chunks: &[Vec<Vec<f32>>], acc: &[Vec<f32>]) -> Result<usize, CommsError> {
    let w = chunks.len();
    let len = chunks.first().and_then(|c| c.first()).map_or(0, Vec::len);
    for (worker, c) in chunks.iter().enumerate() {
        if c.len() != w {
            return Err(CommsError::WorkerCount { expected: w, got: c.len() });
        }
        if let Some(bad) = c.iter().find(|x| x.len() != len) {
            return Err(CommsError::SizeMismatch { worker, expected: len, got: bad.len() });
        }
    }
    if acc.len() != w {
        return Err(CommsError::WorkerCount { expected: w, got: acc.len() });
    }
    for (worker, a) in acc.iter().enumerate() {
        if a.len() != len {
            return Err(CommsError::SizeMismatch { worker, expected: len, got: a.len() });
        }
    }
    Ok(len)
}

/// Three-phase copy-based reduce-scatter.
///
/// `chunks[i][j]` is chunk `j` on worker `i`; `acc[i]` is worker `i`'s
/// sharded accumulator (zeros for a fresh step). Phases per worker `i`:
///
/// 1. add own chunk `i` into the accumulator; chunk `i` becomes free;
/// 2. rounds `r = 1..W-1`: send chunk `i + r` to worker `i + r`, and
///    receive chunk `i` of worker `i - r` into the slot `i + r - 1` freed
///    in the previous round (a barrier separates rounds);
/// 3. add the received chunks into the accumulator in round order.
///
/// The result is `acc + G_i^i + G_i^{i-1} + ... + G_i^{i-W+1}`, each add
/// rounded per `cfg.rounding` with keys from (step, layer, source worker,
/// element), hence independent of the interleaving.
pub fn reduce_scatter_copy(
    chunks: Vec<Vec<Vec<f32>>>,
    acc: Vec<Vec<f32>>,
    cfg: &RsConfig,
    exec: Executor,
) -> Result<ReduceScatterOut, CommsError> {
    let len = validate(&chunks, &acc)?;
    match exec {
        Executor::Threaded => run_threaded(chunks, acc, cfg, len),
        Executor::Sequential => run_lockstep(chunks, acc, cfg, len, None),
        Executor::RandomInterleaving { seed } => run_lockstep(chunks, acc, cfg, len, Some(seed)),
    }
}

fn run_lockstep(
    mut bufs: Vec<Vec<Vec<f32>>>,
    mut acc: Vec<Vec<f32>>,
    cfg: &RsConfig,
    len: usize,
    seed: Option<u64>,
) -> Result<ReduceScatterOut, CommsError> {
    let w = bufs.len();
    let ctx = Ctx { cfg, len };
    let progs: Vec<Vec<Op>> = (0..w).map(|i| program(i, w, cfg.pieces)).collect();
    let mut pc = vec![0usize; w];
    let mut slots: Vec<Vec<Slot>> = vec![vec![Slot::Holding; w]; w];
    let mut audit = ProtocolAudit { rounds: w.saturating_sub(1), copies: vec![0; w], ..Default::default() };
    let mut adds_at_copy_start = None;
    let mut draws = 0u64;

    loop {
        let at_barrier = |pc: &[usize], b: usize| (0..w).all(|j| matches!(progs[j].get(pc[j]), Some(Op::Barrier(x)) if *x == b));
        let runnable: Vec<usize> = (0..w)
            .filter(|&i| match progs[i].get(pc[i]) {
                None => false,
                Some(Op::Barrier(b)) => at_barrier(&pc, *b),
                Some(_) => true,
            })
            .collect();
        if runnable.is_empty() {
            if pc.iter().zip(&progs).all(|(p, prog)| *p == prog.len()) {
                break;
            }
            return Err(CommsError::Protocol("reduce-scatter stalled".into()));
        }
        // Barriers release everyone together.
        if let Some(Op::Barrier(b)) = progs[runnable[0]].get(pc[runnable[0]]) {
            let b = *b;
            if at_barrier(&pc, b) {
                audit.free_chunks.push(
                    slots.iter().map(|s| s.iter().filter(|x| **x == Slot::Free).count()).collect(),
                );
                if b == 0 {
                    adds_at_copy_start = Some(audit.total_adds);
                }
                if b + 1 == w {
                    audit.adds_during_copies = audit.total_adds - adds_at_copy_start.unwrap_or(0);
                }
                for p in pc.iter_mut() {
                    *p += 1;
                }
                continue;
            }
        }
        let i = match seed {
            None => runnable[0],
            Some(s) => {
                draws += 1;
                let r = rng_uniform(RngKey::new(s, stream_id("interleave"), draws)) as usize;
                runnable[r % runnable.len()]
            }
        };
        match progs[i][pc[i]] {
            Op::LocalAdd { piece } => {
                let range = piece_range(len, cfg.pieces, piece);
                audit.total_adds += range.len() as u64;
                let own = std::mem::take(&mut bufs[i][i]);
                ctx.add(&mut acc[i], &own, i, i, range);
                bufs[i][i] = own;
                if piece + 1 == cfg.pieces {
                    slots[i][i] = Slot::Free;
                }
            }
            Op::Send { round, src_slot, dst, dst_slot, piece } => {
                if slots[i][src_slot] != Slot::Holding {
                    return Err(CommsError::Protocol(format!("worker {i} sends non-owned slot {src_slot}")));
                }
                if piece == 0 && slots[dst][dst_slot] != Slot::Free {
                    return Err(CommsError::Protocol(format!(
                        "round {round}: slot {dst_slot} of worker {dst} is not free"
                    )));
                }
                let range = piece_range(len, cfg.pieces, piece);
                let data: Vec<f32> = bufs[i][src_slot][range.clone()].to_vec();
                bufs[dst][dst_slot][range].copy_from_slice(&data);
                slots[dst][dst_slot] = Slot::Received { from: i };
                if piece + 1 == cfg.pieces {
                    slots[i][src_slot] = Slot::Free;
                    audit.copies[i] += 1;
                }
            }
            Op::Reduce { slot, from, piece } => {
                if slots[i][slot] != (Slot::Received { from }) {
                    return Err(CommsError::Protocol(format!("worker {i}: slot {slot} does not hold data from {from}")));
                }
                let range = piece_range(len, cfg.pieces, piece);
                audit.total_adds += range.len() as u64;
                let src = std::mem::take(&mut bufs[i][slot]);
                ctx.add(&mut acc[i], &src, i, from, range);
                bufs[i][slot] = src;
            }
            Op::Barrier(_) => unreachable!(),
        }
        pc[i] += 1;
    }
    if w == 1 {
        audit.free_chunks.push(vec![1]);
    }
    Ok(ReduceScatterOut { shards: acc, audit })
}

fn run_threaded(
    bufs: Vec<Vec<Vec<f32>>>,
    acc: Vec<Vec<f32>>,
    cfg: &RsConfig,
    len: usize,
) -> Result<ReduceScatterOut, CommsError> {
    let w = bufs.len();
    let ctx = Ctx { cfg, len };
    let slots: Vec<Vec<Mutex<Vec<f32>>>> =
        bufs.into_iter().map(|b| b.into_iter().map(Mutex::new).collect()).collect();
    let accs: Vec<Mutex<Vec<f32>>> = acc.into_iter().map(Mutex::new).collect();
    let barrier = Barrier::new(w);
    let copies: Vec<Mutex<usize>> = (0..w).map(|_| Mutex::new(0)).collect();
    std::thread::scope(|s| {
        for i in 0..w {
            let (slots, accs, barrier, ctx, copies) = (&slots, &accs, &barrier, &ctx, &copies);
            s.spawn(move || {
                for op in program(i, w, cfg.pieces) {
                    match op {
                        Op::LocalAdd { piece } => {
                            let src = slots[i][i].lock().unwrap();
                            ctx.add(&mut accs[i].lock().unwrap(), &src, i, i, piece_range(len, cfg.pieces, piece));
                        }
                        Op::Send { src_slot, dst, dst_slot, piece, .. } => {
                            let range = piece_range(len, cfg.pieces, piece);
                            let data = slots[i][src_slot].lock().unwrap()[range.clone()].to_vec();
                            slots[dst][dst_slot].lock().unwrap()[range].copy_from_slice(&data);
                            if piece + 1 == cfg.pieces {
                                *copies[i].lock().unwrap() += 1;
                            }
                        }
                        Op::Barrier(_) => {
                            barrier.wait();
                        }
                        Op::Reduce { slot, from, piece } => {
                            let src = slots[i][slot].lock().unwrap();
                            ctx.add(&mut accs[i].lock().unwrap(), &src, i, from, piece_range(len, cfg.pieces, piece));
                        }
                    }
                }
            });
        }
    });
    let audit = ProtocolAudit {
        rounds: w.saturating_sub(1),
        copies: copies.into_iter().map(|c| c.into_inner().unwrap()).collect(),
        ..Default::default()
    };
    Ok(ReduceScatterOut { shards: accs.into_iter().map(|a| a.into_inner().unwrap()).collect(), audit })
}

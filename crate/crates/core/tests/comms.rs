mod common;

use qtrain_core::comms::*;
use qtrain_core::numerics::{dequantize, quantize_absmax, F8Kind};
use rand::Rng;

fn random_chunks(seed: u64, w: usize, len: usize) -> Vec<Vec<Vec<f32>>> {
    let mut rng = common::rng(seed);
    (0..w)
        .map(|_| (0..w).map(|_| (0..len).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).collect())
        .collect()
}

/// Shard `i` as `G_i^i + G_i^{i-1} + ... + G_i^{i-W+1}`, left to right, in f32.
fn ordered_sum_oracle(chunks: &[Vec<Vec<f32>>]) -> Vec<Vec<f32>> {
    let w = chunks.len();
    (0..w)
        .map(|i| {
            let mut acc = vec![0.0f32; chunks[0][0].len()];
            for r in 0..w {
                let src = (i + w - r) % w;
                for (a, g) in acc.iter_mut().zip(&chunks[src][i]) {
                    *a += g;
                }
            }
            acc
        })
        .collect()
}

fn f32_cfg() -> RsConfig {
    RsConfig { rounding: RsRounding::F32, ..RsConfig::default() }
}

#[test]
fn gather_single_worker_is_identity() {
    let g = all_gather_copy(&[vec![1.0f32, -2.5]]).unwrap();
    assert_eq!(g, vec![vec![1.0, -2.5]]);
}

#[test]
fn fp8_gather_commutes_with_decode() {
    let mut rng = common::rng(3);
    let shards: Vec<_> = (0..4)
        .map(|k| {
            let v: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0f32..1.0) * (k + 1) as f32).collect();
            quantize_absmax(&v, &[32], F8Kind::E4M3).unwrap()
        })
        .collect();
    let decoded: Vec<Vec<f32>> = shards.iter().map(dequantize).collect();
    let after = all_gather_copy(&decoded).unwrap();
    for (gathered, want) in all_gather_fp8(&shards).unwrap().iter().zip(&after) {
        let got = gathered.decode();
        assert!(got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(gathered.scales.len(), 4);
    }
}

#[test]
fn reduce_scatter_then_gather_matches_sum_then_slice() {
    for w in [1usize, 2, 3, 4, 8] {
        let chunks = random_chunks(w as u64, w, 7);
        let out = reduce_scatter_copy(chunks.clone(), vec![vec![0.0; 7]; w], &f32_cfg(), Executor::Sequential).unwrap();
        let oracle = ordered_sum_oracle(&chunks);
        let full = all_gather_copy(&out.shards).unwrap();
        let want: Vec<f32> = oracle.concat();
        for held in &full {
            assert!(held.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), "W = {w}");
        }
        // within rounding of the order-free sum
        for i in 0..w {
            for e in 0..7 {
                let exact: f64 = (0..w).map(|j| chunks[j][i][e] as f64).sum();
                assert!((out.shards[i][e] as f64 - exact).abs() < 1e-5 * w as f64);
            }
        }
    }
}

#[test]
fn stochastic_mode_is_exact_on_bf16_integers() {
    for w in [1usize, 2, 3, 4, 8] {
        let chunks: Vec<Vec<Vec<f32>>> = (0..w)
            .map(|i| (0..w).map(|j| (0..5).map(|e| ((i + 2 * j + e) % 9) as f32 - 4.0).collect()).collect())
            .collect();
        let out =
            reduce_scatter_copy(chunks.clone(), vec![vec![0.0; 5]; w], &RsConfig::default(), Executor::Sequential).unwrap();
        for i in 0..w {
            for e in 0..5 {
                let exact: f32 = (0..w).map(|j| chunks[j][i][e]).sum();
                assert_eq!(out.shards[i][e], exact);
            }
        }
    }
}

#[test]
fn rounds_and_free_chunk_invariant() {
    for w in [2usize, 3, 4, 8] {
        let out = reduce_scatter_copy(random_chunks(9, w, 4), vec![vec![0.0; 4]; w], &RsConfig::default(), Executor::Sequential)
            .unwrap();
        assert_eq!(out.audit.rounds, w - 1);
        // sampled after phase 1 and after each of the W-1 rounds
        assert_eq!(out.audit.free_chunks.len(), w);
        for snapshot in &out.audit.free_chunks {
            assert!(snapshot.iter().all(|&f| f == 1), "W = {w}: {snapshot:?}");
        }
        assert_eq!(out.audit.copies, vec![w - 1; w]);
        assert_eq!(out.audit.adds_during_copies, 0);
        assert_eq!(out.audit.total_adds, (w * w * 4) as u64);
    }
}

#[test]
fn random_interleavings_are_bitwise_identical() {
    let w = 4;
    let chunks = random_chunks(11, w, 16);
    let acc: Vec<Vec<f32>> = random_chunks(12, w, 16).remove(0);
    let cfg = RsConfig { seed: 5, step: 3, layer: 2, pieces: 3, ..RsConfig::default() };
    let base = reduce_scatter_copy(chunks.clone(), acc.clone(), &cfg, Executor::Sequential).unwrap();
    for seed in 0..10_000u64 {
        let out = reduce_scatter_copy(chunks.clone(), acc.clone(), &cfg, Executor::RandomInterleaving { seed }).unwrap();
        assert_eq!(out.audit.adds_during_copies, 0);
        for (a, b) in out.shards.iter().flatten().zip(base.shards.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits(), "interleaving seed {seed}");
        }
    }
}

#[test]
fn threaded_matches_lockstep() {
    let w = 4;
    let chunks = random_chunks(21, w, 64);
    let cfg = RsConfig { seed: 1, pieces: 4, ..RsConfig::default() };
    let base = reduce_scatter_copy(chunks.clone(), vec![vec![0.0; 64]; w], &cfg, Executor::Sequential).unwrap();
    for _ in 0..50 {
        let out = reduce_scatter_copy(chunks.clone(), vec![vec![0.0; 64]; w], &cfg, Executor::Threaded).unwrap();
        assert_eq!(out.shards, base.shards);
        assert_eq!(out.audit.copies, vec![w - 1; w]);
    }
}

#[test]
fn host_cache_events() {
    let g = WorkerGroup::new(4, Topology::pcie4_consumer());
    let fp8 = CachePlan { ga_steps: 1, params: 1_000_000, tensors: 7, fp8: true };
    let one = host_weight_cache(&g, &fp8).unwrap();
    let publishes = |r: &CacheReport| r.events.iter().filter(|e| e.kind == CacheEventKind::Publish).count();
    assert_eq!(publishes(&one), 1);
    assert!(one.events.iter().filter(|e| e.kind == CacheEventKind::CachedRead).all(|e| e.bytes == 0));

    let four = host_weight_cache(&g, &CachePlan { ga_steps: 4, ..fp8 }).unwrap();
    assert_eq!(publishes(&four), 1);
    assert_eq!(four.events.iter().filter(|e| e.kind == CacheEventKind::CachedRead).count(), 7);
    assert_eq!(four.total, one.total);
    assert!(four.per_microbatch[1..].iter().all(|&b| b == 0));

    assert_eq!(fp8.weight_bytes(), 1_000_000 + 7 * 4);
    assert_eq!(CachePlan { fp8: false, ..fp8 }.weight_bytes(), 2_000_000);
}

#[test]
fn weight_sharding_is_cheaper_than_grad_sharding() {
    for workers in [2usize, 3, 4, 8] {
        for p2p in [false, true] {
            let g = WorkerGroup::new(workers, Topology { p2p, ..Topology::pcie4_consumer() });
            let mut prev_grad = 0.0;
            let mut weight_ga1 = None;
            for ga in 1..=16u64 {
                let v = VolumeInputs {
                    params: 7_000_000_000,
                    weight_bytes_per_param: 1.0,
                    grad_bytes_per_param: 2.0,
                    ga_steps: ga,
                    host_cache: true,
                };
                let wt = weight_shard_traffic(&g, &v);
                let gt = grad_shard_traffic(&g, &v);
                assert_eq!(*weight_ga1.get_or_insert(wt), wt);
                assert!(wt < gt, "W {workers} GA {ga}");
                if ga > 1 {
                    assert!((gt / prev_grad - ga as f64 / (ga - 1) as f64).abs() < 1e-12);
                }
                prev_grad = gt;
            }
        }
    }
}

#[test]
fn trace_is_jsonl_with_two_traversals_without_p2p() {
    let g = WorkerGroup::new(3, Topology::pcie4_consumer());
    let ev = reduce_scatter_trace(&g, 4096, 0.0, 1e-5);
    let text = to_jsonl(&ev);
    assert_eq!(text.lines().count(), ev.len());
    let back: Vec<TraceEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, ev);
    let d2h = ev.iter().filter(|e| e.op.ends_with("d2h")).count();
    let h2d = ev.iter().filter(|e| e.op.ends_with("h2d")).count();
    assert_eq!((d2h, h2d), (6, 6));
    // copies sit between the local add and the final reduction
    let first_copy = ev.iter().filter(|e| e.stream == Stream::Copy).map(|e| e.time).fold(f64::MAX, f64::min);
    let first_reduce = ev.iter().filter(|e| e.op.starts_with("reduce")).map(|e| e.time).fold(f64::MAX, f64::min);
    assert!(first_copy >= 1e-5 && first_reduce > first_copy);
}

use QueueOp::{Collective as C, Kernel as K};

fn model(capacity: Option<usize>, barrier: bool) -> IssueModel {
    IssueModel { capacity, shared: true, barrier }
}

#[test]
fn delayed_peer_deadlocks_without_barrier() {
    for k in 2..5 {
        let mut w0 = vec![C(0)];
        w0.extend(std::iter::repeat(K).take(k));
        let s = vec![w0, vec![K, C(0)]];
        let out = barrier_protocol(&s, model(Some(2), false));
        match &out {
            Outcome::Deadlock { issued, executed, .. } => {
                let pending: usize = issued.iter().zip(executed).map(|(i, e)| i - e).sum();
                assert_eq!(pending, 2);
            }
            o => panic!("expected deadlock, got {o:?}"),
        }
        assert!(!barrier_protocol(&s, model(Some(2), true)).is_deadlock());
        assert!(!barrier_protocol(&s, model(None, false)).is_deadlock());
        assert!(!barrier_protocol(&s, model(None, true)).is_deadlock());
    }
}

/// All programs of up to `max_len` ops holding collectives 0..n in order.
fn programs(max_len: usize, n: u32) -> Vec<Vec<QueueOp>> {
    let mut out = Vec::new();
    for len in n as usize..=max_len {
        for mask in 0u32..(1 << len) {
            if mask.count_ones() != n {
                continue;
            }
            let mut next = 0;
            out.push(
                (0..len)
                    .map(|b| {
                        if mask >> b & 1 == 1 {
                            next += 1;
                            C(next - 1)
                        } else {
                            K
                        }
                    })
                    .collect(),
            );
        }
    }
    out
}

#[test]
fn barrier_prevents_every_deadlock_in_small_schedules() {
    let progs: Vec<Vec<QueueOp>> = programs(4, 1).into_iter().chain(programs(5, 2)).collect();
    let mut deadlocks_without = 0;
    let mut checked = 0;
    for a in &progs {
        for b in &progs {
            let n = |p: &Vec<QueueOp>| p.iter().filter(|o| matches!(o, C(_))).count();
            if n(a) != n(b) {
                continue;
            }
            let s = vec![a.clone(), b.clone()];
            for cap in [2usize, 3] {
                checked += 1;
                assert!(!barrier_protocol(&s, model(Some(cap), true)).is_deadlock(), "{s:?} cap {cap}");
                deadlocks_without += barrier_protocol(&s, model(Some(cap), false)).is_deadlock() as usize;
            }
            assert!(!barrier_protocol(&s, model(None, false)).is_deadlock());
        }
    }
    assert!(checked > 100);
    assert!(deadlocks_without > 0);
}

#[test]
fn three_workers_with_barrier() {
    let progs = programs(3, 1);
    for a in &progs {
        for b in &progs {
            for c in &progs {
                let s = vec![a.clone(), b.clone(), c.clone()];
                assert!(!barrier_protocol(&s, model(Some(3), true)).is_deadlock(), "{s:?}");
            }
        }
    }
}

#[test]
fn barrier_needs_one_slot_per_worker() {
    let s = vec![vec![C(0)], vec![C(0)]];
    assert!(barrier_protocol(&s, model(Some(1), true)).is_deadlock());
    assert!(!barrier_protocol(&s, model(Some(2), true)).is_deadlock());
}

#[test]
fn per_worker_queues_do_not_reproduce_the_hang() {
    let s = vec![vec![C(0), K, K], vec![K, C(0)]];
    let m = IssueModel { capacity: Some(2), shared: false, barrier: false };
    assert!(!barrier_protocol(&s, m).is_deadlock());
}

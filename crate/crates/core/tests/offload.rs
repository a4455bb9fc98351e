use qtrain_core::memplan::{memory_breakdown, qwen25, HardwareProfile, RunPlan};
use qtrain_core::model::{ModelConfig, PrecisionMap, RecomputeSet};
use qtrain_core::comms::{Stream, TraceEvent};
use qtrain_core::offload::*;

fn toy4() -> ModelConfig {
    ModelConfig { n_layers: 4, ..ModelConfig::toy() }
}

fn roomy(policy: TransferPolicy) -> TierBudget {
    TierBudget {
        device_bytes: u64::MAX,
        host_bytes: u64::MAX,
        transfer_policy: policy,
        zero_copy_efficiency: 0.5,
        mem_bandwidth: 1e12,
    }
}

fn plan(offload: &str, recompute: &str) -> RunPlan {
    RunPlan { offload: offload.parse().unwrap(), recompute: recompute.parse().unwrap(), ..RunPlan::default() }
}

#[test]
fn no_offload_means_no_transfers() {
    for cfg in [toy4(), qwen25("0.5b").unwrap()] {
        for policy in [TransferPolicy::ZeroCopy, TransferPolicy::DoubleBuffer] {
            let r = plan_residency(&cfg, &plan("none", "none"), &roomy(policy), 1);
            assert_eq!(r.transfers().count(), 0);
        }
    }
}

#[test]
fn full_offload_alternates_two_weight_buffers() {
    let cfg = toy4();
    let r = plan_residency(&cfg, &plan("x,m,v,g,theta,theta*", "block"), &roomy(TransferPolicy::DoubleBuffer), 1);
    let trace = r.slot_trace(Category::ParamsFp8);
    assert!(!trace.is_empty());
    for &(a, b) in &trace {
        if let Some(a) = a {
            assert_eq!(a % 2, 0, "slot A holds even layers");
        }
        if let Some(b) = b {
            assert_eq!(b % 2, 1, "slot B holds odd layers");
        }
    }
    // forward weight loads go 0,1,2,3 alternating A,B
    let loads: Vec<(BufferSlot, usize)> = r
        .events
        .iter()
        .filter(|e| e.pass == Pass::Forward && e.op == ResidencyOp::Prefetch && e.category == Some(Category::ParamsFp8))
        .map(|e| (e.slot.unwrap(), e.layer.unwrap()))
        .collect();
    assert_eq!(
        loads,
        vec![(BufferSlot::A, 0), (BufferSlot::B, 1), (BufferSlot::A, 2), (BufferSlot::B, 3)]
    );
    let layer = qtrain_core::memplan::LayerSizes::new(&cfg, &plan("x,m,v,g,theta,theta*", "block"));
    assert_eq!(r.high_water.params_fp8, 2 * layer.weights);
}

#[test]
fn weights_and_grads_streamed_use_two_buffers() {
    for size in ["1.5b", "7b"] {
        let cfg = qwen25(size).unwrap();
        for prec in [PrecisionMap::FP8, PrecisionMap::BF16] {
            let p = RunPlan { precision: prec, ..plan("theta,g,x", "block") };
            let s = qtrain_core::memplan::LayerSizes::new(&cfg, &p);
            let r = plan_residency(&cfg, &p, &roomy(TransferPolicy::DoubleBuffer), 1);
            let rep = cfg.replicated_params();
            let (block_weights, replicated) = if prec.is_fp8() {
                (r.high_water.params_fp8, 0)
            } else {
                (r.high_water.params_bf16_master, rep * 2)
            };
            assert_eq!(block_weights - replicated, 2 * s.weights, "{size} {prec}");
            assert_eq!(r.high_water.grads - rep * s.grad_bytes, 2 * s.grads);
        }
    }
}

#[test]
fn prefetch_issued_one_layer_ahead() {
    let cfg = ModelConfig { n_layers: 6, ..ModelConfig::toy() };
    let r = plan_residency(&cfg, &plan("x,m,v,g,theta,theta*", "block"), &roomy(TransferPolicy::DoubleBuffer), 1);
    for pass in [Pass::Forward, Pass::Backward, Pass::Optimizer] {
        let computes: Vec<(usize, usize)> = r
            .events
            .iter()
            .filter(|e| e.pass == pass && e.op == ResidencyOp::Compute)
            .map(|e| (e.seq, e.layer.unwrap()))
            .collect();
        assert_eq!(computes.len(), 6);
        for e in r.events.iter().filter(|e| e.pass == pass && e.op == ResidencyOp::Prefetch) {
            let target = e.layer.unwrap();
            let pos = computes.iter().position(|&(_, l)| l == target).unwrap();
            // issued before the compute of the preceding layer
            if pos > 0 {
                assert!(e.seq < computes[pos - 1].0, "{pass:?} layer {target}");
            } else {
                assert!(e.seq < computes[0].0);
            }
        }
    }
}

#[test]
fn high_water_matches_memory_breakdown() {
    let mut checked = 0;
    for cfg in [toy4(), ModelConfig { n_layers: 1, ..ModelConfig::toy() }, qwen25("1.5b").unwrap()] {
        for prec in [PrecisionMap::FP8, PrecisionMap::BF16] {
            for recompute in RecomputeSet::levels() {
                for offload in OffloadSet::subsets() {
                    for policy in [TransferPolicy::ZeroCopy, TransferPolicy::DoubleBuffer] {
                        for (workers, shard) in [(1, false), (4, false), (4, true)] {
                            let p = RunPlan {
                                precision: prec,
                                recompute,
                                offload,
                                transfer_policy: policy,
                                shard_weights: shard,
                                shard_grads: shard,
                                chunking: offload.bits() % 2 == 0,
                                micro_batch: 2,
                                ..RunPlan::default()
                            };
                            if p.validate(workers).is_err() {
                                continue;
                            }
                            let m = memory_breakdown(&cfg, &p, workers);
                            let r = plan_residency(&cfg, &p, &roomy(policy), workers);
                            assert_eq!(r.device_high_water, m.device_total(), "{p} W={workers}");
                            assert_eq!(r.host_bytes, m.host_total());
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 5000);
}

#[test]
fn feasible_schedule_stays_within_budget() {
    let cfg = qwen25("7b").unwrap();
    let hw = HardwareProfile::builtin("rtx5060ti").unwrap();
    let budget = hw.budget(TransferPolicy::DoubleBuffer);
    let p = RunPlan { micro_batch: 32, ..plan("x,m,v,g,theta,theta*", "block") };
    let r = plan_residency(&cfg, &p, &budget, 1);
    assert!(r.feasible);
    assert!(r.events.iter().all(|e| e.device_bytes <= budget.device_bytes));

    let p = RunPlan { micro_batch: 32, ..plan("m,v,g,theta,theta*", "block") };
    let r = plan_residency(&cfg, &p, &budget, 1);
    assert!(!r.feasible);
    assert!(r.device_high_water > budget.device_bytes);
}

#[test]
fn zero_copy_optimizer_needs_no_staging() {
    let cfg = toy4();
    let p = plan("m,v,theta*", "block");
    let zc = plan_residency(&cfg, &p, &roomy(TransferPolicy::ZeroCopy), 1);
    let db = plan_residency(&cfg, &p, &roomy(TransferPolicy::DoubleBuffer), 1);
    assert!(zc.device_high_water <= db.device_high_water);
    assert!(zc
        .events
        .iter()
        .filter(|e| e.pass == Pass::Optimizer && e.op.is_transfer())
        .all(|e| e.op == ResidencyOp::ZeroCopy && e.slot.is_none()));
}

#[test]
fn jsonl_uses_comms_trace_format() {
    let r = plan_residency(&toy4(), &plan("x,theta,theta*", "block"), &roomy(TransferPolicy::DoubleBuffer), 1);
    let text = r.to_jsonl(0, 1e-3, 64e9);
    let back: Vec<TraceEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back.len(), r.events.len());
    for (a, b) in back.iter().zip(r.trace(0, 1e-3, 64e9)) {
        assert_eq!((&a.op, a.stream, a.bytes, a.worker), (&b.op, b.stream, b.bytes, b.worker));
        assert!((a.time - b.time).abs() < 1e-15);
    }
    assert!(back[0].op.starts_with("alloc."));
    assert!(back.iter().any(|e| e.op == "prefetch.params_fp8.layer1.B" && e.stream == Stream::Copy));
    // copies never start before they are issued, and the copy stream is serial
    let mut copy_end = 0.0;
    for (t, e) in back.iter().zip(&r.events) {
        if t.stream == Stream::Copy {
            assert!(t.time >= copy_end - 1e-15);
            copy_end = t.time + e.bytes as f64 / 64e9;
        }
    }
}

#[test]
fn transfer_time_policies() {
    let consumer = HardwareProfile::builtin("rtx4090").unwrap();
    let work = HardwareProfile::builtin("l40s").unwrap();
    let gib = 1u64 << 30;
    let t = |hw: &HardwareProfile, p| transfer_time(gib, &hw.budget(p), &hw.topology());
    assert!(t(&consumer, TransferPolicy::ZeroCopy) > t(&consumer, TransferPolicy::DoubleBuffer));
    assert!(t(&work, TransferPolicy::ZeroCopy) < t(&work, TransferPolicy::DoubleBuffer));
    assert_eq!(consumer.preferred_policy(), TransferPolicy::DoubleBuffer);
    assert_eq!(work.preferred_policy(), TransferPolicy::ZeroCopy);

    let topo = consumer.topology();
    let b = TierBudget { zero_copy_efficiency: 1.0, ..consumer.budget(TransferPolicy::ZeroCopy) };
    assert!((transfer_time(64_000_000_000, &b, &topo) - 1.0 - TRANSFER_LATENCY).abs() < 1e-9);
    assert_eq!(transfer_time(0, &b, &topo), TRANSFER_LATENCY);
}

#[test]
fn offload_set_text_forms() {
    for s in OffloadSet::subsets() {
        let text = s.to_string();
        assert_eq!(text.parse::<OffloadSet>().unwrap(), s);
    }
    assert_eq!("θ,θ*".parse::<OffloadSet>().unwrap(), OffloadSet::of(&[Tensors::Theta, Tensors::Master]));
    assert_eq!("---".parse::<OffloadSet>().unwrap(), OffloadSet::NONE);
    assert!("q".parse::<OffloadSet>().is_err());
}

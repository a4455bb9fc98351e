mod common;

use common::*;
use proptest::prelude::*;
use qtrain_core::numerics::*;
use qtrain_core::tensorops::*;
use rand::Rng;

#[test]
fn fp8_matmul_of_small_integers_is_exact() {
    // Values whose product with the absmax scale (448/4 = 112) is an exact
    // E4M3 value, verified by enumeration below.
    let palette = [-4.0f32, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0];
    let representable: Vec<f32> = (0..=255u8).map(|c| f8_decode(c, F8Kind::E4M3)).collect();
    for v in palette {
        assert!(representable.contains(&(v * 112.0)));
    }
    let mut r = rng(1);
    for _ in 0..200 {
        let mut pick = |n: usize| {
            let mut d: Vec<f32> = (0..n).map(|_| palette[r.gen_range(0..palette.len())]).collect();
            d[0] = 4.0;
            d
        };
        let a = Tensor::from_vec(&[2, 2], pick(4)).unwrap();
        let b = Tensor::from_vec(&[2, 2], pick(4)).unwrap();
        let qa = quantize_absmax(&a.data, &a.shape, F8Kind::E4M3).unwrap();
        let qb = quantize_absmax(&b.data, &b.shape, F8Kind::E4M3).unwrap();
        let got = matmul_tn(Operand::Fp8(&qa), Operand::Fp8(&qb)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: i64 = (0..2).map(|k| (a.data[i * 2 + k] * b.data[j * 2 + k]) as i64).sum();
                assert_eq!(got.data[i * 2 + j], want as f32);
            }
        }
    }
}

#[test]
fn bf16_matmul_against_f64_reference() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[8, 8], 2.0).stored(Storage::Bf16);
    let b = random_tensor(&mut r, &[8, 8], 2.0).stored(Storage::Bf16);
    let out = matmul_tn(Operand::Dense(&a), Operand::Dense(&b)).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let (mut exact, mut mag) = (0.0f64, 0.0f64);
            for k in 0..8 {
                let p = a.data[i * 8 + k] as f64 * b.data[j * 8 + k] as f64;
                exact += p;
                mag += p.abs();
            }
            let bound = 8.0 * f32::EPSILON as f64 * mag;
            assert!((out.data[i * 8 + j] as f64 - exact).abs() <= bound);
        }
    }
}

#[test]
fn transpose_quantize_shapes() {
    let sym = Tensor::from_vec(&[3, 3], vec![1.0, 2.0, -3.0, 2.0, 0.5, 7.0, -3.0, 7.0, 0.0]).unwrap();
    let q = transpose_quantize(&sym, F8Kind::E4M3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(q.codes[i * 3 + j], q.codes[j * 3 + i]);
        }
    }
    let row = Tensor::from_vec(&[1, 4], vec![1.0, -0.5, 2.0, 0.25]).unwrap();
    let q = transpose_quantize(&row, F8Kind::E5M2).unwrap();
    let plain = quantize_absmax(&row.data, &row.shape, F8Kind::E5M2).unwrap();
    assert_eq!(q.shape, vec![4, 1]);
    assert_eq!(q.codes, plain.codes);
}

#[test]
fn fused_rmsnorm_equals_unfused() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[5, 16], 1.0).stored(Storage::Bf16);
    let res = random_tensor(&mut r, &[5, 16], 3.0).stored(Storage::Bf16);
    let gamma = random_tensor(&mut r, &[16], 1.5).stored(Storage::Bf16);
    for store in [Storage::Bf16, Storage::F32] {
        let (nr, fused) = rmsnorm_residual_fused(&x, &res, &gamma, DEFAULT_RMS_EPS, store).unwrap();
        let added = residual_add(&x, &res, store).unwrap();
        let plain = rmsnorm(&added, &gamma, DEFAULT_RMS_EPS, store).unwrap();
        assert!(nr.bits_eq(&added));
        assert!(fused.normed.value.bits_eq(&plain.normed.value));
        assert_eq!(fused.rstd, plain.rstd);
        assert_eq!(fused.normed.absmax, absmax(&fused.normed.value.data).unwrap());
    }
}

#[test]
fn rmsnorm_backward_finite_differences() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[3, 8], 2.0);
    let gamma = random_tensor(&mut r, &[8], 1.5);
    let w = random_tensor(&mut r, &[3, 8], 1.0);
    let fwd = rmsnorm(&x, &gamma, DEFAULT_RMS_EPS, Storage::F32).unwrap();
    let (dx, dg) = rmsnorm_backward(&x, &fwd.rstd, &gamma, &w).unwrap();

    let mut fx = |p: &[f32]| {
        let t = Tensor::from_vec(&x.shape, p.to_vec()).unwrap();
        probe(&rmsnorm(&t, &gamma, DEFAULT_RMS_EPS, Storage::F32).unwrap().normed.value.data, &w.data)
    };
    let num: Vec<f64> = (0..x.len()).map(|i| central_diff(&mut fx, &x.data, i, 1e-2)).collect();
    assert!(max_rel_err(&dx.data, &num, 1e-2) < 1e-3);

    let mut fg = |p: &[f32]| {
        let g = Tensor::from_vec(&gamma.shape, p.to_vec()).unwrap();
        probe(&rmsnorm(&x, &g, DEFAULT_RMS_EPS, Storage::F32).unwrap().normed.value.data, &w.data)
    };
    let num: Vec<f64> = (0..gamma.len()).map(|i| central_diff(&mut fg, &gamma.data, i, 1e-2)).collect();
    assert!(max_rel_err(&dg.data, &num, 1e-2) < 1e-3);
}

#[test]
fn swiglu_backward_finite_differences() {
    let mut r = rng(5);
    let gu = random_tensor(&mut r, &[4, 12], 3.0);
    let w = random_tensor(&mut r, &[4, 6], 1.0);
    let analytic = swiglu_backward(&gu, &w).unwrap();
    let (rows, half) = (4, 6);
    let wd = widen(&w.data);
    let mut f = |p: &[f64]| {
        let mut acc = 0.0;
        for r in 0..rows {
            for j in 0..half {
                let (g, u) = (p[r * 2 * half + j], p[r * 2 * half + half + j]);
                acc += g / (1.0 + (-g).exp()) * u * wd[r * half + j];
            }
        }
        acc
    };
    let x = widen(&gu.data);
    let num: Vec<f64> = (0..x.len()).map(|i| central_diff64(&mut f, &x, i, 1e-3)).collect();
    let err = max_rel_err(&analytic.data, &num, 1e-3);
    assert!(err < 1e-4, "relative error {err}");
}

fn attn_inputs(seed: u64, dims: AttnDims) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let rows = dims.batch * dims.seq;
    (
        random_tensor(&mut r, &[rows, dims.n_heads * dims.head_dim], 1.0).stored(Storage::Bf16),
        random_tensor(&mut r, &[rows, dims.n_kv_heads * dims.head_dim], 1.0).stored(Storage::Bf16),
        random_tensor(&mut r, &[rows, dims.n_kv_heads * dims.head_dim], 1.0).stored(Storage::Bf16),
    )
}

/// Unchunked attention written out directly, same accumulation order.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, d: AttnDims) -> Tensor {
    let (qc, kc, hd) = (d.n_heads * d.head_dim, d.n_kv_heads * d.head_dim, d.head_dim);
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Tensor::zeros(&q.shape);
    for b in 0..d.batch {
        for h in 0..d.n_heads {
            let kh = h / (d.n_heads / d.n_kv_heads);
            for i in 0..d.seq {
                let qi = &q.data[(b * d.seq + i) * qc + h * hd..][..hd];
                let mut s: Vec<f32> = (0..=i)
                    .map(|j| {
                        let kj = &k.data[(b * d.seq + j) * kc + kh * hd..][..hd];
                        let mut acc = 0.0f32;
                        for t in 0..hd {
                            acc += qi[t] * kj[t];
                        }
                        acc * scale
                    })
                    .collect();
                let m = s.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0f32;
                for x in s.iter_mut() {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                for t in 0..hd {
                    let mut acc = 0.0f32;
                    for (j, &e) in s.iter().enumerate() {
                        acc += e * inv * v.data[(b * d.seq + j) * kc + kh * hd + t];
                    }
                    out.data[(b * d.seq + i) * qc + h * hd + t] = Storage::Bf16.store(acc);
                }
            }
        }
    }
    out
}

#[test]
fn attention_single_chunk_equals_naive() {
    let dims = AttnDims { batch: 2, seq: 7, n_heads: 4, n_kv_heads: 2, head_dim: 8 };
    let (q, k, v) = attn_inputs(6, dims);
    let fwd = sdpa_chunked(&q, &k, &v, dims, dims.seq, Storage::Bf16).unwrap();
    assert!(fwd.out.bits_eq(&naive_attention(&q, &k, &v, dims)));
}

#[test]
fn attention_is_chunk_invariant() {
    let dims = AttnDims { batch: 2, seq: 9, n_heads: 4, n_kv_heads: 2, head_dim: 8 };
    let (q, k, v) = attn_inputs(7, dims);
    let d_out = random_tensor(&mut rng(8), &q.shape, 1.0).stored(Storage::Bf16);
    let reference = sdpa_chunked(&q, &k, &v, dims, dims.seq, Storage::Bf16).unwrap();
    let ref_grads =
        sdpa_backward_chunked(&q, &k, &v, &reference.out, &reference.lse, &d_out, dims, dims.seq).unwrap();
    for chunk in [1, 2, 4, 100] {
        let f = sdpa_chunked(&q, &k, &v, dims, chunk, Storage::Bf16).unwrap();
        assert!(f.out.bits_eq(&reference.out), "chunk {chunk}");
        assert_eq!(f.lse, reference.lse);
        let g = sdpa_backward_chunked(&q, &k, &v, &f.out, &f.lse, &d_out, dims, chunk).unwrap();
        assert!(g.dq.bits_eq(&ref_grads.dq));
        assert!(g.dk.bits_eq(&ref_grads.dk));
        assert!(g.dv.bits_eq(&ref_grads.dv));
        assert!(f.workspace_bytes <= reference.workspace_bytes);
    }
}

/// Causal GQA attention in f64, probed with weights `w`.
fn attention_probe64(q: &[f64], k: &[f64], v: &[f64], w: &[f64], d: AttnDims) -> f64 {
    let (qc, kc, hd) = (d.n_heads * d.head_dim, d.n_kv_heads * d.head_dim, d.head_dim);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut total = 0.0;
    for b in 0..d.batch {
        for h in 0..d.n_heads {
            let kh = h / (d.n_heads / d.n_kv_heads);
            for i in 0..d.seq {
                let qi = &q[(b * d.seq + i) * qc + h * hd..][..hd];
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = &k[(b * d.seq + j) * kc + kh * hd..][..hd];
                        qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..hd {
                    let o: f64 = (0..=i).map(|j| e[j] / z * v[(b * d.seq + j) * kc + kh * hd + t]).sum();
                    total += o * w[(b * d.seq + i) * qc + h * hd + t];
                }
            }
        }
    }
    total
}

#[test]
fn attention_backward_finite_differences() {
    let dims = AttnDims { batch: 1, seq: 5, n_heads: 2, n_kv_heads: 1, head_dim: 4 };
    let mut r = rng(9);
    let q = random_tensor(&mut r, &[5, 8], 1.0);
    let k = random_tensor(&mut r, &[5, 4], 1.0);
    let v = random_tensor(&mut r, &[5, 4], 1.0);
    let w = random_tensor(&mut r, &[5, 8], 1.0);
    let fwd = sdpa_chunked(&q, &k, &v, dims, 2, Storage::F32).unwrap();
    let g = sdpa_backward_chunked(&q, &k, &v, &fwd.out, &fwd.lse, &w, dims, 2).unwrap();

    let (q64, k64, v64, w64) = (widen(&q.data), widen(&k.data), widen(&v.data), widen(&w.data));
    let num_q: Vec<f64> = (0..q64.len())
        .map(|i| central_diff64(&mut |p| attention_probe64(p, &k64, &v64, &w64, dims), &q64, i, 1e-3))
        .collect();
    let num_k: Vec<f64> = (0..k64.len())
        .map(|i| central_diff64(&mut |p| attention_probe64(&q64, p, &v64, &w64, dims), &k64, i, 1e-3))
        .collect();
    let num_v: Vec<f64> = (0..v64.len())
        .map(|i| central_diff64(&mut |p| attention_probe64(&q64, &k64, p, &w64, dims), &v64, i, 1e-3))
        .collect();
    for (name, a, n) in [("dq", &g.dq, num_q), ("dk", &g.dk, num_k), ("dv", &g.dv, num_v)] {
        let err = max_rel_err(&a.data, &n, 1e-2);
        assert!(err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn deterministic_reduce_is_stable_under_cancellation() {
    let mut r = rng(10);
    let partials: Vec<Tensor> = (0..16)
        .map(|i| {
            let big = if i % 2 == 0 { 1e7 } else { -1e7 };
            Tensor::from_vec(&[64], (0..64).map(|_| big + r.gen_range(-1.0f32..1.0)).collect()).unwrap()
        })
        .collect();
    let first = deterministic_reduce(&partials).unwrap();
    for _ in 0..100 {
        assert!(deterministic_reduce(&partials).unwrap().bits_eq(&first));
    }
    // sequential summation error bound against an f64 reference
    for e in 0..64 {
        let exact: f64 = partials.iter().map(|p| p.data[e] as f64).sum();
        let mag: f64 = partials.iter().map(|p| p.data[e].abs() as f64).sum();
        let bound = partials.len() as f64 * f32::EPSILON as f64 * mag;
        assert!((first.data[e] as f64 - exact).abs() <= bound);
    }
}

#[test]
fn two_phase_column_sum_is_thread_count_independent() {
    let m = random_tensor(&mut rng(11), &[300, 7], 5.0);
    let reference = column_sum_two_phase(&m).unwrap();
    for threads in [1, 2, 3, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let got = pool.install(|| column_sum_two_phase(&m).unwrap());
        assert!(got.bits_eq(&reference));
    }
}

#[test]
fn embedding_backward_matches_scatter_add() {
    let mut r = rng(12);
    let vocab = 17;
    let ids: Vec<u32> = (0..200).map(|_| r.gen_range(0..vocab as u32)).collect();
    let g = random_tensor(&mut r, &[200, 6], 1.0);
    let got = embedding_backward_sorted(&ids, &g, vocab).unwrap();
    let mut want = Tensor::zeros(&[vocab, 6]);
    for (p, &id) in ids.iter().enumerate() {
        for k in 0..6 {
            want.data[id as usize * 6 + k] += g.data[p * 6 + k];
        }
    }
    assert!(got.bits_eq(&want));
    assert!(embedding_backward_sorted(&ids, &g, vocab).unwrap().bits_eq(&got));
}

#[test]
fn embedding_backward_single_token() {
    let g = random_tensor(&mut rng(13), &[9, 3], 1.0);
    let got = embedding_backward_sorted(&[4; 9], &g, 6).unwrap();
    for v in 0..6 {
        if v == 4 {
            let mut want = [0.0f32; 3];
            for p in 0..9 {
                for k in 0..3 {
                    want[k] += g.data[p * 3 + k];
                }
            }
            assert_eq!(got.row(v), want);
        } else {
            assert!(got.row(v).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn cross_entropy_is_chunk_invariant() {
    let mut r = rng(14);
    let hidden = random_tensor(&mut r, &[13, 8], 1.0).stored(Storage::Bf16);
    let w = random_tensor(&mut r, &[29, 8], 1.0).stored(Storage::Bf16);
    let targets: Vec<u32> = (0..13).map(|_| r.gen_range(0..29)).collect();
    let full = fused_cross_entropy_chunked(&hidden, &w, &targets, 13, Storage::Bf16).unwrap();
    for chunk in [1, 2, 5] {
        let c = fused_cross_entropy_chunked(&hidden, &w, &targets, chunk, Storage::Bf16).unwrap();
        assert_eq!(c.loss.to_bits(), full.loss.to_bits());
        assert!(c.d_hidden.bits_eq(&full.d_hidden));
        assert!(c.d_lm_w.bits_eq(&full.d_lm_w));
        assert_eq!(c.workspace_bytes, chunk * 29 * 4);
    }
}

/// Mean token cross-entropy in f64 with logits `hidden . w^T`.
fn cross_entropy64(h: &[f64], w: &[f64], targets: &[u32], dim: usize) -> f64 {
    let vocab = w.len() / dim;
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let logits: Vec<f64> = (0..vocab)
            .map(|v| (0..dim).map(|k| h[t * dim + k] * w[v * dim + k]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y as usize];
    }
    total / targets.len() as f64
}

#[test]
fn cross_entropy_finite_differences() {
    let mut r = rng(15);
    let hidden = random_tensor(&mut r, &[4, 6], 1.0);
    let w = random_tensor(&mut r, &[11, 6], 1.0);
    let targets = [3u32, 0, 10, 3];
    let out = fused_cross_entropy_chunked(&hidden, &w, &targets, 2, Storage::F32).unwrap();
    let (h64, w64) = (widen(&hidden.data), widen(&w.data));
    assert!((out.loss as f64 - cross_entropy64(&h64, &w64, &targets, 6)).abs() < 1e-5);
    let num_h: Vec<f64> = (0..h64.len())
        .map(|i| central_diff64(&mut |p| cross_entropy64(p, &w64, &targets, 6), &h64, i, 1e-3))
        .collect();
    let num_w: Vec<f64> = (0..w64.len())
        .map(|i| central_diff64(&mut |p| cross_entropy64(&h64, p, &targets, 6), &w64, i, 1e-3))
        .collect();
    let eh = max_rel_err(&out.d_hidden.data, &num_h, 1e-2);
    let ew = max_rel_err(&out.d_lm_w.data, &num_w, 1e-2);
    assert!(eh < 1e-4 && ew < 1e-4, "d_hidden {eh}, d_lm_w {ew}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_outputs_report_exact_absmax(
        data in prop::collection::vec(-50.0f32..50.0, 24),
        seed in 0u64..1000,
    ) {
        let gu = Tensor::from_vec(&[3, 8], data.clone()).unwrap();
        let s = swiglu_fused(&gu, Storage::Bf16).unwrap();
        prop_assert_eq!(s.absmax, absmax(&s.value.data).unwrap());
        let gamma = random_tensor(&mut rng(seed), &[8], 2.0);
        let n = rmsnorm(&gu, &gamma, DEFAULT_RMS_EPS, Storage::Bf16).unwrap();
        prop_assert_eq!(n.normed.absmax, absmax(&n.normed.value.data).unwrap());
        // bitwise determinism
        prop_assert!(swiglu_fused(&gu, Storage::Bf16).unwrap().value.bits_eq(&s.value));
    }
}

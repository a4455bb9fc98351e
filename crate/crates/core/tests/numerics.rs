use proptest::prelude::*;
use qtrain_core::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn code_table() -> Vec<(F8Kind, u8, f32)> {
    let text = include_str!("../testdata/fp8_codes.txt");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let kind: F8Kind = parts[0].parse().unwrap();
            let code = u8::from_str_radix(parts[1].trim_start_matches("0x"), 16).unwrap();
            let value = match parts[3] {
                "nan" => f32::NAN,
                "inf" => f32::INFINITY,
                "-inf" => f32::NEG_INFINITY,
                v => v.parse().unwrap(),
            };
            (kind, code, value)
        })
        .collect()
}

#[test]
fn decode_matches_checked_in_vectors() {
    let table = code_table();
    assert_eq!(table.len(), 512);
    for (kind, code, value) in table {
        let got = f8_decode(code, kind);
        if value.is_nan() {
            assert!(got.is_nan(), "{kind} {code:#04x}");
        } else {
            assert_eq!(got.to_bits(), value.to_bits(), "{kind} {code:#04x}");
        }
    }
}

#[test]
fn exhaustive_round_trip() {
    for kind in F8Kind::ALL {
        for c in 0..=255u8 {
            if kind.is_nan_code(c) {
                continue;
            }
            assert_eq!(f8_encode(f8_decode(c, kind), kind), c, "{kind} {c:#04x}");
        }
    }
}

/// Nearest finite code by scanning all 256 patterns; ties prefer an even
/// mantissa LSB. `extended` allows values past fmax (i.e. no saturation) by
/// comparing against the grid only.
fn nearest_by_scan(x: f32, kind: F8Kind) -> f32 {
    let mut best: Option<(f64, u8)> = None;
    for c in 0..=255u8 {
        let v = f8_decode(c, kind);
        if !v.is_finite() {
            continue;
        }
        let d = (v as f64 - x as f64).abs();
        best = match best {
            None => Some((d, c)),
            Some((bd, bc)) if d < bd || (d == bd && bc & 1 == 1 && c & 1 == 0) => Some((d, c)),
            keep => keep,
        };
    }
    let v = f8_decode(best.unwrap().1, kind);
    if v == 0.0 { 0.0 } else { v }
}

#[test]
fn encode_agrees_with_scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in F8Kind::ALL {
        let fmax = kind.fmax();
        for _ in 0..20_000 {
            let mag = fmax * rng.gen::<f32>().powi(8);
            let x = if rng.gen() { mag } else { -mag };
            let got = f8_decode(f8_encode(x, kind), kind);
            let want = nearest_by_scan(x, kind);
            assert_eq!(got.abs(), want.abs(), "{kind} x={x}");
        }
    }
}

#[test]
fn dequantize_error_bounded_by_mantissa_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in F8Kind::ALL {
        let rel_bound = 2f32.powi(-(kind.mantissa_bits() as i32) - 1);
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let t: Vec<f32> = (0..n).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            let q = quantize_absmax(&t, &[n], kind).unwrap();
            let back = dequantize(&q);
            for (i, (&x, &y)) in t.iter().zip(&back).enumerate() {
                let scaled = x * q.scale;
                let oracle = nearest_by_scan(scaled, kind);
                assert_eq!(q.decoded(i).abs(), oracle.abs());
                // Normal range: relative error within half a mantissa ULP.
                if scaled.abs() >= kind.min_normal() {
                    assert!(((y - x) / x).abs() <= rel_bound * 1.0001, "{kind} {x} -> {y}");
                }
            }
        }
    }
}

#[test]
fn absmax_scaling_never_clips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10_000 {
        let kind = F8Kind::ALL[i % 2];
        let n = rng.gen_range(1..64);
        let mag = 10f32.powi(rng.gen_range(-6..6));
        let t: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * mag).collect();
        let q = quantize_absmax(&t, &[n], kind).unwrap();
        for (e, &x) in t.iter().enumerate() {
            assert!((x * q.scale).abs() <= kind.fmax() * (1.0 + f32::EPSILON), "{kind} tensor {i}");
            assert!(q.decoded(e).is_finite() && q.decoded(e).abs() <= kind.fmax());
        }
    }
}

#[test]
fn single_element_over_all_codes() {
    for kind in F8Kind::ALL {
        for c in 0..=255u8 {
            let x = f8_decode(c, kind);
            if !x.is_finite() || x == 0.0 {
                continue;
            }
            let q = quantize_absmax(&[x], &[1], kind).unwrap();
            let scaled = x * q.scale;
            let back = q.decoded(0);
            let half_ulp = 2f32.powi(scaled.abs().log2().floor() as i32 - kind.mantissa_bits() as i32 - 1);
            assert!((back - scaled).abs() <= half_ulp);
            assert!(((dequantize(&q)[0] - x) / x).abs() < 1e-6);
        }
    }
}

#[test]
fn stochastic_rounding_midpoint_is_fair() {
    let x = 1.0f32 + 2f32.powi(-8);
    let (lo, hi) = bf16_neighbors(x);
    assert_eq!((lo, hi), (1.0, 1.0 + 2f32.powi(-7)));
    let n = 100_000u64;
    let ups = (0..n)
        .filter(|&c| sr_bf16(x, RngKey::new(42, 7, c)) == hi)
        .count();
    let frac = ups as f64 / n as f64;
    assert!((0.49..=0.51).contains(&frac), "up fraction {frac}");
}

#[test]
fn stochastic_rounding_is_unbiased() {
    for &x in &[1.0f32 + 0.3 * 2f32.powi(-7), -3.7e-3, 1234.567] {
        let (lo, hi) = bf16_neighbors(x);
        let p = ((x - lo) / (hi - lo)) as f64;
        let n = 100_000u64;
        let mean = (0..n)
            .map(|c| sr_bf16(x, RngKey::new(9, 1, c)) as f64)
            .sum::<f64>()
            / n as f64;
        let sigma = (p * (1.0 - p)).sqrt() * (hi - lo) as f64 / (n as f64).sqrt();
        assert!((mean - x as f64).abs() <= 3.0 * sigma, "x={x} mean={mean} sigma={sigma}");
    }
}

#[test]
fn rng_chi_square_256_buckets() {
    let draws = 1_000_000u64;
    let mut buckets = [0u64; 256];
    for c in 0..draws {
        buckets[(rng_uniform(RngKey::new(2024, 5, c)) >> 24) as usize] += 1;
    }
    let expected = draws as f64 / 256.0;
    let chi2: f64 = buckets
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2={chi2} p={p}");
}

#[test]
fn rng_birthday_collisions() {
    // 2^16 draws: expected colliding pairs = n^2 / 2^33 = 0.5.
    let n = 1u64 << 16;
    let mut outs: Vec<u32> = (0..n).map(|c| rng_uniform(RngKey::new(77, 0, c))).collect();
    outs.sort_unstable();
    let collisions = outs.windows(2).filter(|w| w[0] == w[1]).count();
    assert!(collisions <= 5, "{collisions} collisions");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn absmax_is_order_independent(mut t in prop::collection::vec(-1e6f32..1e6, 0..64)) {
        let a = absmax(&t).unwrap();
        t.reverse();
        prop_assert_eq!(a, absmax(&t).unwrap());
        let scan = t.iter().fold(0.0f32, |m, x| if x.abs() > m { x.abs() } else { m });
        prop_assert_eq!(a, scan);
    }

    #[test]
    fn stochastic_rounding_lands_on_a_neighbor(x in -1e30f32..1e30, c in any::<u64>()) {
        let (lo, hi) = bf16_neighbors(x);
        let r = sr_bf16(x, RngKey::new(1, 1, c));
        prop_assert!(r == lo || r == hi);
    }
}

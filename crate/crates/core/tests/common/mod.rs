#![allow(dead_code)]

pub mod reference;

use qtrain_core::tensorops::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Fourth-order central difference of `f` at coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], i: usize, h: f32) -> f64 {
    let mut p = x.to_vec();
    let mut eval = |delta: f32| {
        p[i] = x[i] + delta;
        f(&p)
    };
    let (f1, fm1, f2, fm2) = (eval(h), eval(-h), eval(2.0 * h), eval(-2.0 * h));
    (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h as f64)
}

/// Largest mixed relative error: `|a - n| / max(|a|, |n|, floor)`, with the
/// floor set to `floor_frac` of the largest analytic magnitude.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64], floor_frac: f64) -> f64 {
    let gmax = analytic.iter().fold(0.0f64, |m, &a| m.max(a.abs() as f64));
    let floor = (gmax * floor_frac).max(1e-30);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (a.abs() as f64).max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Deterministic weighted sum used as a scalar probe of a tensor output.
pub fn probe(values: &[f32], weights: &[f32]) -> f64 {
    values.iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum()
}

/// Fourth-order central difference in f64 for reference implementations.
pub fn central_diff64(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut eval = |delta: f64| {
        p[i] = x[i] + delta;
        f(&p)
    };
    let (f1, fm1, f2, fm2) = (eval(h), eval(-h), eval(2.0 * h), eval(-2.0 * h));
    (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h)
}

pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

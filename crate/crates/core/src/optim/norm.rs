/// Partial sum of squares of one tensor, in element order.
fn partial(t: &[f32]) -> f64 {
    t.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

/// L2 norm over all tensors. Per-tensor partial sums in f64, combined in
/// the given order.
pub fn global_grad_norm(tensors: &[&[f32]]) -> f32 {
    tensors.iter().map(|t| partial(t)).sum::<f64>().sqrt() as f32
}

/// Norm over gradients scattered across workers (`shards[worker][tensor]`).
/// Each worker contributes one partial per tensor; partials are combined
/// tensor by tensor in worker order, and the single result is what every
/// worker sees.
pub fn global_grad_norm_sharded(shards: &[Vec<&[f32]>]) -> f32 {
    let tensors = shards.iter().map(Vec::len).max().unwrap_or(0);
    let mut total = 0.0f64;
    for k in 0..tensors {
        for worker in shards {
            if let Some(t) = worker.get(k) {
                total += partial(t);
            }
        }
    }
    total.sqrt() as f32
}

/// Gradient multiplier for clipping at `max_norm`; 1 when already within.
pub fn clip_coefficient(norm: f32, max_norm: Option<f32>) -> f32 {
    match max_norm {
        Some(c) if norm > c && norm.is_finite() => c / norm,
        _ => 1.0,
    }
}

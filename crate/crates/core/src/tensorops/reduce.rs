//! Deterministic reductions.

use rayon::prelude::*;

use super::{Tensor, TensorError};

/// Rows per partial buffer in [`column_sum_two_phase`]. Fixed, so the
/// partition never depends on the thread count.
const BLOCK_ROWS: usize = 64;

/// Elementwise sum of equally shaped partials, in list order.
pub fn deterministic_reduce(partials: &[Tensor]) -> Result<Tensor, TensorError> {
    let first = partials.first().ok_or(TensorError::EmptyPartials)?;
    for p in &partials[1..] {
        if p.shape != first.shape {
            return Err(TensorError::ShapeMismatch {
                op: "deterministic_reduce",
                expected: first.shape.clone(),
                got: p.shape.clone(),
            });
        }
    }
    let mut out = first.clone();
    out.data.par_iter_mut().enumerate().for_each(|(i, o)| {
        for p in &partials[1..] {
            *o += p.data[i];
        }
    });
    Ok(out)
}

/// Column sums of a `[rows, cols]` matrix in two phases: fixed blocks of
/// rows are summed into private partial buffers (in parallel), then the
/// partials are combined in block order.
pub fn column_sum_two_phase(m: &Tensor) -> Result<Tensor, TensorError> {
    let rows = m.rows();
    let cols = m.cols();
    if rows == 0 {
        return Ok(Tensor::zeros(&[cols]));
    }
    let partials: Vec<Tensor> = (0..rows.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0f32; cols];
            for i in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(rows) {
                for (a, &v) in acc.iter_mut().zip(m.row(i)) {
                    *a += v;
                }
            }
            Tensor { shape: vec![cols], data: acc }
        })
        .collect();
    deterministic_reduce(&partials)
}

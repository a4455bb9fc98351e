//! Token embedding lookup and its sort-based deterministic backward.

use super::{Tensor, TensorError};

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), TensorError> {
    match ids.iter().position(|&id| id as usize >= vocab) {
        Some(position) => Err(TensorError::IdOutOfRange { id: ids[position], position, vocab }),
        None => Ok(()),
    }
}

pub fn embedding_forward(ids: &[u32], table: &Tensor) -> Result<Tensor, TensorError> {
    let (vocab, d) = table.matrix_dims("embedding_forward")?;
    check_ids(ids, vocab)?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}

/// `grad[v] = sum of grad_out rows at positions holding token v`, summed in
/// ascending position order.
///
/// Positions are sorted by token id (stable, so ties stay in position
/// order) and each run of equal ids is reduced by a single owner, which is
/// what removes the need for atomics or a per-block scratch table.
pub fn embedding_backward_sorted(
    ids: &[u32],
    grad_out: &Tensor,
    vocab: usize,
) -> Result<Tensor, TensorError> {
    let (n, d) = grad_out.matrix_dims("embedding_backward")?;
    if n != ids.len() {
        return Err(TensorError::ShapeMismatch {
            op: "embedding_backward",
            expected: vec![ids.len(), d],
            got: grad_out.shape.clone(),
        });
    }
    check_ids(ids, vocab)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| ids[p]);

    let mut grad = Tensor::zeros(&[vocab, d]);
    for run in order.chunk_by(|&a, &b| ids[a] == ids[b]) {
        let dst = grad.row_mut(ids[run[0]] as usize);
        for &p in run {
            for (g, &x) in dst.iter_mut().zip(grad_out.row(p)) {
                *g += x;
            }
        }
    }
    Ok(grad)
}

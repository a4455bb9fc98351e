//! LM-head projection fused with softmax cross-entropy and its backward.
//!
//! Tokens are processed in chunks of `chunk_tokens`; only one chunk of logits
//! ever exists. The hidden-state gradient of a chunk is written straight into
//! its slice of the output, and the LM-head weight gradient is accumulated
//! chunk after chunk in ascending token order, so the result does not depend
//! on the chunk size.

use super::{Storage, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropyOut {
    /// Mean token loss.
    pub loss: f32,
    pub d_hidden: Tensor,
    pub d_lm_w: Tensor,
    /// Logit scratch high-water mark.
    pub workspace_bytes: usize,
}

/// `hidden: [N, d]`, `lm_w: [V, d]`, one target per row.
///
/// Logits are rounded with `store` (the LM-head matmul output precision);
/// softmax and all gradient arithmetic run in f32.
pub fn fused_cross_entropy_chunked(
    hidden: &Tensor,
    lm_w: &Tensor,
    targets: &[u32],
    chunk_tokens: usize,
    store: Storage,
) -> Result<CrossEntropyOut, TensorError> {
    let (n, d) = hidden.matrix_dims("cross_entropy")?;
    let (vocab, dw) = lm_w.matrix_dims("cross_entropy")?;
    if dw != d || targets.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![n, d],
            got: vec![targets.len(), dw],
        });
    }
    if let Some(position) = targets.iter().position(|&t| t as usize >= vocab) {
        return Err(TensorError::IdOutOfRange { id: targets[position], position, vocab });
    }
    let chunk = chunk_tokens.clamp(1, n.max(1));
    let inv_n = 1.0 / n as f32;

    let mut d_hidden = Tensor::zeros(&[n, d]);
    let mut d_lm_w = Tensor::zeros(&[vocab, d]);
    let mut logits = vec![0.0f32; chunk * vocab];
    let mut loss_sum = 0.0f32;

    for c0 in (0..n).step_by(chunk) {
        let c1 = (c0 + chunk).min(n);
        for t in c0..c1 {
            let h = hidden.row(t);
            let lrow = &mut logits[(t - c0) * vocab..][..vocab];
            for (v, l) in lrow.iter_mut().enumerate() {
                let w = lm_w.row(v);
                let mut acc = 0.0f32;
                for k in 0..d {
                    acc += h[k] * w[k];
                }
                *l = store.store(acc);
            }
            let m = lrow.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0f32;
            for &l in lrow.iter() {
                sum += (l - m).exp();
            }
            let lse = m + sum.ln();
            let target = targets[t] as usize;
            loss_sum += lse - lrow[target];
            // logits become dloss/dlogits in place
            for (v, l) in lrow.iter_mut().enumerate() {
                let p = (*l - lse).exp();
                *l = (p - if v == target { 1.0 } else { 0.0 }) * inv_n;
            }
            let dh = d_hidden.row_mut(t);
            for (k, g) in dh.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for v in 0..vocab {
                    acc += lrow[v] * lm_w.data[v * d + k];
                }
                *g = acc;
            }
        }
        for t in c0..c1 {
            let h = hidden.row(t);
            let lrow = &logits[(t - c0) * vocab..][..vocab];
            for (v, &dl) in lrow.iter().enumerate() {
                let gw = &mut d_lm_w.data[v * d..(v + 1) * d];
                for k in 0..d {
                    gw[k] += dl * h[k];
                }
            }
        }
    }

    Ok(CrossEntropyOut {
        loss: loss_sum * inv_n,
        d_hidden,
        d_lm_w,
        workspace_bytes: chunk * vocab * 4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_log_vocab() {
        let hidden = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let w = Tensor::zeros(&[11, 2]);
        let out = fused_cross_entropy_chunked(&hidden, &w, &[0, 4, 10], 2, Storage::F32).unwrap();
        assert!((out.loss - (11f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn target_out_of_range() {
        let hidden = Tensor::zeros(&[1, 2]);
        let w = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            fused_cross_entropy_chunked(&hidden, &w, &[3], 1, Storage::F32),
            Err(TensorError::IdOutOfRange { .. })
        ));
    }
}

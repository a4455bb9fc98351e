//! Causal scaled-dot-product attention, chunked over query rows.
//!
//! Chunking only bounds the scratch buffer (`chunk_rows x seq` floats); the
//! loop nest is `batch -> head -> chunk -> row -> key`, so every
//! accumulation (including the key/value gradients, which sum over query
//! rows) sees the same operand sequence whatever the chunk size. Softmax
//! internals are f32; inputs and outputs follow the caller's storage.

use super::{Storage, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn q_cols(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn kv_cols(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }

    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(), TensorError> {
        let rows = self.batch * self.seq;
        for (t, cols) in [(q, self.q_cols()), (k, self.kv_cols()), (v, self.kv_cols())] {
            if t.shape != [rows, cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "sdpa",
                    expected: vec![rows, cols],
                    got: t.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOut {
    pub out: Tensor,
    /// Log-sum-exp per `(batch, head, row)`, kept for backward.
    pub lse: Vec<f32>,
    /// High-water scratch bytes.
    pub workspace_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub workspace_bytes: usize,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Causal attention forward. `chunk_rows` larger than `seq` is clamped.
pub fn sdpa_chunked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dims: AttnDims,
    chunk_rows: usize,
    store: Storage,
) -> Result<AttnOut, TensorError> {
    dims.check(q, k, v)?;
    let AttnDims { batch, seq, n_heads, head_dim: hd, .. } = dims;
    let chunk = chunk_rows.clamp(1, seq.max(1));
    let scale = 1.0 / (hd as f32).sqrt();
    let (qc, kc) = (dims.q_cols(), dims.kv_cols());

    let mut out = Tensor::zeros(&q.shape);
    let mut lse = vec![0.0f32; batch * n_heads * seq];
    let mut scores = vec![0.0f32; chunk * seq];

    for b in 0..batch {
        let base = b * seq;
        for h in 0..n_heads {
            let kh = dims.kv_head(h);
            for c0 in (0..seq).step_by(chunk) {
                let c1 = (c0 + chunk).min(seq);
                for i in c0..c1 {
                    let qi = &q.data[(base + i) * qc + h * hd..][..hd];
                    let srow = &mut scores[(i - c0) * seq..][..i + 1];
                    let mut m = f32::NEG_INFINITY;
                    for (j, s) in srow.iter_mut().enumerate() {
                        let kj = &k.data[(base + j) * kc + kh * hd..][..hd];
                        *s = dot(qi, kj) * scale;
                        m = m.max(*s);
                    }
                    let mut sum = 0.0f32;
                    for s in srow.iter_mut() {
                        *s = (*s - m).exp();
                        sum += *s;
                    }
                    let inv = 1.0 / sum;
                    lse[(b * n_heads + h) * seq + i] = m + sum.ln();
                    let o = &mut out.data[(base + i) * qc + h * hd..][..hd];
                    for (d, od) in o.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for (j, &e) in srow.iter().enumerate() {
                            acc += e * inv * v.data[(base + j) * kc + kh * hd + d];
                        }
                        *od = store.store(acc);
                    }
                }
            }
        }
    }
    Ok(AttnOut { out, lse, workspace_bytes: chunk * seq * 4 })
}

/// Causal attention backward using the forward output and log-sum-exp.
#[allow(clippy::too_many_arguments)]
pub fn sdpa_backward_chunked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    lse: &[f32],
    d_out: &Tensor,
    dims: AttnDims,
    chunk_rows: usize,
) -> Result<AttnGrads, TensorError> {
    dims.check(q, k, v)?;
    if d_out.shape != q.shape || out.shape != q.shape {
        return Err(TensorError::ShapeMismatch {
            op: "sdpa_backward",
            expected: q.shape.clone(),
            got: d_out.shape.clone(),
        });
    }
    let AttnDims { batch, seq, n_heads, head_dim: hd, .. } = dims;
    let chunk = chunk_rows.clamp(1, seq.max(1));
    let scale = 1.0 / (hd as f32).sqrt();
    let (qc, kc) = (dims.q_cols(), dims.kv_cols());

    let mut dq = Tensor::zeros(&q.shape);
    let mut dk = Tensor::zeros(&k.shape);
    let mut dv = Tensor::zeros(&v.shape);
    // probabilities and score gradients for one chunk of rows
    let mut probs = vec![0.0f32; chunk * seq];
    let mut dscore = vec![0.0f32; chunk * seq];

    for b in 0..batch {
        let base = b * seq;
        for h in 0..n_heads {
            let kh = dims.kv_head(h);
            for c0 in (0..seq).step_by(chunk) {
                let c1 = (c0 + chunk).min(seq);
                for i in c0..c1 {
                    let row = base + i;
                    let qi = &q.data[row * qc + h * hd..][..hd];
                    let doi = &d_out.data[row * qc + h * hd..][..hd];
                    let oi = &out.data[row * qc + h * hd..][..hd];
                    let delta = dot(doi, oi);
                    let l = lse[(b * n_heads + h) * seq + i];
                    let prow = &mut probs[(i - c0) * seq..][..i + 1];
                    let dsrow = &mut dscore[(i - c0) * seq..][..i + 1];
                    for j in 0..=i {
                        let kj = &k.data[(base + j) * kc + kh * hd..][..hd];
                        let vj = &v.data[(base + j) * kc + kh * hd..][..hd];
                        let p = (dot(qi, kj) * scale - l).exp();
                        prow[j] = p;
                        dsrow[j] = p * (dot(doi, vj) - delta);
                    }
                    let dqi = &mut dq.data[row * qc + h * hd..][..hd];
                    for (d, g) in dqi.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for j in 0..=i {
                            acc += dsrow[j] * k.data[(base + j) * kc + kh * hd + d];
                        }
                        *g = acc * scale;
                    }
                }
                // key/value gradients: ascending query rows within the chunk,
                // chunks visited in ascending order
                for i in c0..c1 {
                    let row = base + i;
                    let qi = &q.data[row * qc + h * hd..][..hd];
                    let doi = &d_out.data[row * qc + h * hd..][..hd];
                    let prow = &probs[(i - c0) * seq..][..i + 1];
                    let dsrow = &dscore[(i - c0) * seq..][..i + 1];
                    for j in 0..=i {
                        let off = (base + j) * kc + kh * hd;
                        let (ds, p) = (dsrow[j] * scale, prow[j]);
                        for d in 0..hd {
                            dk.data[off + d] += ds * qi[d];
                            dv.data[off + d] += p * doi[d];
                        }
                    }
                }
            }
        }
    }
    Ok(AttnGrads { dq, dk, dv, workspace_bytes: 2 * chunk * seq * 4 })
}

//! RMS normalisation, optionally fused with the residual-stream add.

use super::reduce::column_sum_two_phase;
use super::{FusedOut, Storage, Tensor, TensorError};

pub const DEFAULT_RMS_EPS: f32 = 1e-6;

/// Normalised output plus the per-row reciprocal RMS kept for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct NormOut {
    pub normed: FusedOut,
    pub rstd: Vec<f32>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    Ok(())
}

fn check_gamma(x: &Tensor, gamma: &Tensor) -> Result<(), TensorError> {
    if gamma.len() != x.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm",
            expected: vec![x.cols()],
            got: gamma.shape.clone(),
        });
    }
    Ok(())
}

#[inline]
fn row_rstd(row: &[f32], eps: f32) -> f32 {
    let mut ss = 0.0f32;
    for &v in row {
        ss += v * v;
    }
    1.0 / (ss / row.len() as f32 + eps).sqrt()
}

/// `rmsnorm(x) * gamma`, with the output absmax.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f32, store: Storage) -> Result<NormOut, TensorError> {
    check_gamma(x, gamma)?;
    let cols = x.cols();
    let mut out = Tensor::zeros(&x.shape);
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let r = row_rstd(row, eps);
        rstd.push(r);
        let o = &mut out.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            o[j] = store.store(row[j] * r * gamma.data[j]);
        }
    }
    Ok(NormOut { normed: FusedOut::new(out)?, rstd })
}

/// `x + residual`, stored.
pub fn residual_add(x: &Tensor, residual: &Tensor, store: Storage) -> Result<Tensor, TensorError> {
    check_same("residual_add", residual, x)?;
    let data = x
        .data
        .iter()
        .zip(&residual.data)
        .map(|(&a, &b)| store.store(a + b))
        .collect();
    Ok(Tensor { shape: x.shape.clone(), data })
}

/// One pass over each row: `new_residual = x + residual`, then
/// `normed = rmsnorm(new_residual) * gamma` and its absmax.
///
/// Normalisation reads the stored (rounded) residual, so the result is
/// bitwise equal to `residual_add` followed by `rmsnorm`.
pub fn rmsnorm_residual_fused(
    x: &Tensor,
    residual: &Tensor,
    gamma: &Tensor,
    eps: f32,
    store: Storage,
) -> Result<(Tensor, NormOut), TensorError> {
    check_same("rmsnorm_residual_fused", residual, x)?;
    check_gamma(x, gamma)?;
    let cols = x.cols();
    let mut new_res = Tensor::zeros(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    let mut rstd = Vec::with_capacity(x.rows());
    let mut amax = 0.0f32;
    for i in 0..x.rows() {
        let (xr, rr) = (x.row(i), residual.row(i));
        let nr = &mut new_res.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            nr[j] = store.store(xr[j] + rr[j]);
        }
        let r = row_rstd(nr, eps);
        rstd.push(r);
        let o = &mut out.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            o[j] = store.store(nr[j] * r * gamma.data[j]);
            amax = amax.max(o[j].abs());
        }
    }
    if let Some(index) = out.data.iter().position(|v| v.is_nan()) {
        return Err(crate::numerics::NumericsError::NanInTensor { index }.into());
    }
    Ok((
        new_res,
        NormOut {
            normed: FusedOut { value: out, absmax: amax },
            rstd,
        },
    ))
}

/// Gradients of `y = x * rstd * gamma` given `dy`.
///
/// Returns `(dx, dgamma)`; `dgamma` is summed over rows with the two-phase
/// reduction.
pub fn rmsnorm_backward(
    x: &Tensor,
    rstd: &[f32],
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    check_same("rmsnorm_backward", x, dy)?;
    check_gamma(x, gamma)?;
    let cols = x.cols();
    let rows = x.rows();
    let mut dx = Tensor::zeros(&x.shape);
    let mut contrib = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let (xr, dyr, r) = (x.row(i), dy.row(i), rstd[i]);
        let mut dot = 0.0f32;
        for j in 0..cols {
            dot += dyr[j] * gamma.data[j] * xr[j];
        }
        let coef = dot * r * r * r / cols as f32;
        let dxr = &mut dx.data[i * cols..(i + 1) * cols];
        let cr = &mut contrib.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dxr[j] = dyr[j] * gamma.data[j] * r - xr[j] * coef;
            cr[j] = dyr[j] * xr[j] * r;
        }
    }
    let dgamma = column_sum_two_phase(&contrib)?;
    Ok((dx, Tensor { shape: gamma.shape.clone(), data: dgamma.data }))
}

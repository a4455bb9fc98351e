use serde::{Deserialize, Serialize};

use super::linear;
use super::rope::RopeTable;
use super::{ModelConfig, ModelError, Params, PrecisionMap, RecomputeSet};
use crate::numerics::{absmax, F8Kind};
use crate::tensorops::{
    embedding_forward, fused_cross_entropy_chunked, rmsnorm, rmsnorm_residual_fused, sdpa_chunked,
    swiglu_fused, swiglu_fused_quant, AttnDims, CrossEntropyOut, Storage, Tensor, DEFAULT_RMS_EPS,
};

/// Everything besides the data that shapes a forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub recompute: RecomputeSet,
    pub precision: PrecisionMap,
    /// Query rows per attention chunk.
    pub attn_chunk: usize,
    /// Tokens per cross-entropy chunk.
    pub ce_chunk: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            recompute: RecomputeSet::NONE,
            precision: PrecisionMap::FP8,
            attn_chunk: 64,
            ce_chunk: 256,
        }
    }
}

/// `batch` sequences of `seq` tokens, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Absmax of each quantized matmul input of one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub norm1: f32,
    pub attn: f32,
    pub norm2: f32,
    pub swiglu: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardStats {
    pub layers: Vec<LayerStats>,
}

/// Per-block activations kept for backward. `residual` (the block input on
/// the residual stream) is always kept; everything else depends on the
/// recompute set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSaved {
    pub residual: Tensor,
    pub norm1: Option<(Tensor, Vec<f32>)>,
    pub qkv: Option<Tensor>,
    pub attn: Option<(Tensor, Vec<f32>)>,
    pub mid_residual: Option<Tensor>,
    pub norm2: Option<(Tensor, Vec<f32>)>,
    pub gate_up: Option<Tensor>,
    pub swiglu: Option<Tensor>,
}

impl LayerSaved {
    /// Names of the stored activations, residual first.
    pub fn kept(&self) -> Vec<&'static str> {
        let mut out = vec!["residual"];
        let opt = [
            ("norm1", self.norm1.is_some()),
            ("qkv", self.qkv.is_some()),
            ("attn", self.attn.is_some()),
            ("mid_residual", self.mid_residual.is_some()),
            ("norm2", self.norm2.is_some()),
            ("gate_up", self.gate_up.is_some()),
            ("swiglu", self.swiglu.is_some()),
        ];
        out.extend(opt.iter().filter(|(_, k)| *k).map(|(n, _)| *n));
        out
    }

    /// Bytes of stored activations at `elem` bytes per element.
    pub fn bytes(&self, elem: usize) -> usize {
        let t = |x: &Tensor| x.len() * elem;
        let with_stats = |x: &Option<(Tensor, Vec<f32>)>| x.as_ref().map_or(0, |(a, s)| t(a) + 4 * s.len());
        t(&self.residual)
            + with_stats(&self.norm1)
            + self.qkv.as_ref().map_or(0, t)
            + with_stats(&self.attn)
            + self.mid_residual.as_ref().map_or(0, t)
            + with_stats(&self.norm2)
            + self.gate_up.as_ref().map_or(0, t)
            + self.swiglu.as_ref().map_or(0, t)
    }
}

/// Forward state handed to backward.
#[derive(Debug, Clone)]
pub struct Saved {
    pub options: RunOptions,
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<u32>,
    pub layers: Vec<LayerSaved>,
    pub stats: ForwardStats,
    pub final_residual: Tensor,
    pub final_rstd: Vec<f32>,
    /// Loss plus LM-head gradients; the head runs forward and backward in
    /// one fused pass.
    pub head: CrossEntropyOut,
}

impl Saved {
    pub fn loss(&self) -> f32 {
        self.head.loss
    }

    pub fn activation_bytes(&self) -> usize {
        let elem = self.options.precision.storage().bytes_per_elem();
        self.layers.iter().map(|l| l.bytes(elem)).sum::<usize>() + self.final_residual.len() * elem
    }
}

pub(crate) fn check_finite(t: &Tensor, site: String) -> Result<(), ModelError> {
    match t.first_non_finite() {
        Some(index) => Err(ModelError::NonFinite { site, index }),
        None => Ok(()),
    }
}

pub(crate) fn attn_dims(cfg: &ModelConfig, batch: usize, seq: usize) -> AttnDims {
    AttnDims {
        batch,
        seq,
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim(),
    }
}

/// Split the fused projection into `q, k, v` and rotate `q` and `k`.
pub(crate) fn split_qkv(
    qkv: &Tensor,
    cfg: &ModelConfig,
    rope: &RopeTable,
    seq: usize,
    store: Storage,
) -> (Tensor, Tensor, Tensor) {
    let rows = qkv.rows();
    let (qc, kc) = (cfg.n_heads * cfg.head_dim(), cfg.n_kv_heads * cfg.head_dim());
    let mut q = Tensor::zeros(&[rows, qc]);
    let mut k = Tensor::zeros(&[rows, kc]);
    let mut v = Tensor::zeros(&[rows, kc]);
    for r in 0..rows {
        let src = qkv.row(r);
        q.row_mut(r).copy_from_slice(&src[..qc]);
        k.row_mut(r).copy_from_slice(&src[qc..qc + kc]);
        v.row_mut(r).copy_from_slice(&src[qc + kc..]);
    }
    rope.apply(&mut q, seq, 0, cfg.n_heads, false, store);
    rope.apply(&mut k, seq, 0, cfg.n_kv_heads, false, store);
    (q, k, v)
}

pub(crate) fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<(), ModelError> {
    let n = batch.tokens();
    if batch.inputs.len() != n || batch.targets.len() != n || batch.seq == 0 || batch.seq > cfg.seq_len {
        return Err(ModelError::InvalidBatch(format!(
            "{} inputs / {} targets for batch {} x seq {} (max seq {})",
            batch.inputs.len(),
            batch.targets.len(),
            batch.batch,
            batch.seq,
            cfg.seq_len
        )));
    }
    for ids in [&batch.inputs, &batch.targets] {
        if let Some(p) = ids.iter().position(|&t| t as usize >= cfg.vocab) {
            return Err(ModelError::InvalidBatch(format!("token {} at {p} >= vocab {}", ids[p], cfg.vocab)));
        }
    }
    Ok(())
}

/// Run the model on `batch` and return the mean token loss together with
/// what backward needs.
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    batch: &Batch,
    opts: &RunOptions,
) -> Result<(f32, Saved), ModelError> {
    cfg.validate()?;
    check_batch(cfg, batch)?;
    let prec = &opts.precision;
    let store = prec.storage();
    let rc = &opts.recompute;
    let (seq, n) = (batch.seq, batch.tokens());
    let dims = attn_dims(cfg, batch.batch, seq);
    let rope = RopeTable::new(seq, cfg.head_dim());

    let mut pending = embedding_forward(&batch.inputs, &params.embed)?.stored(store);
    let mut stream = Tensor::zeros(&[n, cfg.d_model]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut stats = ForwardStats::default();

    for (l, lp) in params.layers.iter().enumerate() {
        let site = |s: &str| format!("layers.{l}.{s}");
        let (residual, n1) = rmsnorm_residual_fused(&pending, &stream, &lp.ln1, DEFAULT_RMS_EPS, store)?;
        check_finite(&residual, site("residual"))?;
        let mut st = LayerStats { norm1: n1.normed.absmax, ..Default::default() };

        let qkv = linear::forward(&n1.normed.value, st.norm1, &lp.wqkv, prec)?;
        check_finite(&qkv, site("qkv"))?;
        let (q, k, v) = split_qkv(&qkv, cfg, &rope, seq, store);
        let att = sdpa_chunked(&q, &k, &v, dims, opts.attn_chunk, store)?;
        st.attn = absmax(&att.out.data).map_err(|_| ModelError::NonFinite {
            site: site("attn"),
            index: att.out.first_non_finite().unwrap_or(0),
        })?;
        let o = linear::forward(&att.out, st.attn, &lp.wo, prec)?;
        check_finite(&o, site("attn_proj"))?;

        let (mid, n2) = rmsnorm_residual_fused(&o, &residual, &lp.ln2, DEFAULT_RMS_EPS, store)?;
        st.norm2 = n2.normed.absmax;
        let gu = linear::forward(&n2.normed.value, st.norm2, &lp.wgu, prec)?;
        check_finite(&gu, site("gate_up"))?;
        let s = swiglu_fused(&gu, store)?;
        st.swiglu = s.absmax;
        let f = linear::forward(&s.value, st.swiglu, &lp.wd, prec)?;
        check_finite(&f, site("ffn_out"))?;

        layers.push(LayerSaved {
            residual,
            norm1: (!rc.drops_norm_out()).then_some((n1.normed.value, n1.rstd)),
            qkv: (!rc.drops_qkv()).then_some(qkv),
            attn: (!rc.drops_attention()).then_some((att.out, att.lse)),
            norm2: (!rc.drops_norm_out()).then_some((n2.normed.value, n2.rstd)),
            gate_up: (!rc.drops_gate_up()).then_some(gu),
            swiglu: (!rc.drops_swiglu()).then_some(s.value),
            mid_residual: (!rc.drops_mid_residual()).then_some(mid.clone()),
        });
        stats.layers.push(st);
        pending = f;
        stream = mid;
    }

    let (final_residual, nf) = rmsnorm_residual_fused(&pending, &stream, &params.ln_f, DEFAULT_RMS_EPS, store)?;
    check_finite(&final_residual, "final_residual".into())?;
    let head = fused_cross_entropy_chunked(&nf.normed.value, params.lm_weight(), &batch.targets, opts.ce_chunk, store)?;
    if !head.loss.is_finite() {
        return Err(ModelError::NonFinite { site: "loss".into(), index: 0 });
    }
    let loss = head.loss;
    Ok((
        loss,
        Saved {
            options: *opts,
            batch: batch.batch,
            seq,
            inputs: batch.inputs.clone(),
            layers,
            stats,
            final_residual,
            final_rstd: nf.rstd,
            head,
        },
    ))
}

/// Activations of one block rebuilt from the stored ones and the cached
/// statistics.
pub(crate) struct Rebuilt {
    pub norm1: (Tensor, Vec<f32>),
    pub qkv: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: (Tensor, Vec<f32>),
    pub mid_residual: Tensor,
    pub norm2: (Tensor, Vec<f32>),
    pub gate_up: Tensor,
    pub swiglu: SwigluInput,
}

pub(crate) enum SwigluInput {
    Dense(Tensor),
    Quant(crate::numerics::ScaledQuant),
}

fn take<T: Clone>(x: &Option<T>, dropped: bool, layer: usize, name: &'static str) -> Result<Option<T>, ModelError> {
    match (x, dropped) {
        (Some(v), _) => Ok(Some(v.clone())),
        (None, true) => Ok(None),
        (None, false) => Err(ModelError::MissingSaved { layer, name }),
    }
}

/// Recompute whatever the recompute set dropped. FP8 quantization uses the
/// recorded absmax, so the results are bitwise identical to forward.
pub(crate) fn rebuild(
    cfg: &ModelConfig,
    params: &Params,
    saved: &Saved,
    l: usize,
    rope: &RopeTable,
) -> Result<Rebuilt, ModelError> {
    let opts = &saved.options;
    let (prec, rc, store) = (&opts.precision, &opts.recompute, opts.precision.storage());
    let (lp, ls, st) = (&params.layers[l], &saved.layers[l], saved.stats.layers[l]);
    let dims = attn_dims(cfg, saved.batch, saved.seq);

    let norm1 = match take(&ls.norm1, rc.drops_norm_out(), l, "norm1")? {
        Some(v) => v,
        None => {
            let n = rmsnorm(&ls.residual, &lp.ln1, DEFAULT_RMS_EPS, store)?;
            (n.normed.value, n.rstd)
        }
    };
    let qkv = match take(&ls.qkv, rc.drops_qkv(), l, "qkv")? {
        Some(v) => v,
        None => linear::forward(&norm1.0, st.norm1, &lp.wqkv, prec)?,
    };
    let (q, k, v) = split_qkv(&qkv, cfg, rope, saved.seq, store);
    let attn = match take(&ls.attn, rc.drops_attention(), l, "attn")? {
        Some(a) => a,
        None => {
            let a = sdpa_chunked(&q, &k, &v, dims, opts.attn_chunk, store)?;
            (a.out, a.lse)
        }
    };
    let mid_residual = match take(&ls.mid_residual, rc.drops_mid_residual(), l, "mid_residual")? {
        Some(m) => m,
        None => {
            let o = linear::forward(&attn.0, st.attn, &lp.wo, prec)?;
            crate::tensorops::residual_add(&o, &ls.residual, store)?
        }
    };
    let norm2 = match take(&ls.norm2, rc.drops_norm_out(), l, "norm2")? {
        Some(v) => v,
        None => {
            let n = rmsnorm(&mid_residual, &lp.ln2, DEFAULT_RMS_EPS, store)?;
            (n.normed.value, n.rstd)
        }
    };
    let gate_up = match take(&ls.gate_up, rc.drops_gate_up(), l, "gate_up")? {
        Some(g) => g,
        None => linear::forward(&norm2.0, st.norm2, &lp.wgu, prec)?,
    };
    let swiglu = match take(&ls.swiglu, rc.drops_swiglu(), l, "swiglu")? {
        Some(s) => SwigluInput::Dense(s),
        None if prec.is_fp8() => {
            SwigluInput::Quant(swiglu_fused_quant(&gate_up, store, F8Kind::E4M3, st.swiglu)?)
        }
        None => SwigluInput::Dense(swiglu_fused(&gate_up, store)?.value),
    };
    Ok(Rebuilt { norm1, qkv, q, k, v, attn, mid_residual, norm2, gate_up, swiglu })
}

use super::forward::{attn_dims, check_finite, rebuild, Saved, SwigluInput};
use super::linear::{self, SavedInput};
use super::rope::RopeTable;
use super::{AccumCtx, ModelConfig, ModelError, Params, RunOptions};
use crate::tensorops::{
    embedding_backward_sorted, residual_add, rmsnorm_backward, sdpa_backward_chunked, swiglu_backward, Tensor,
};

fn scaled(t: &Tensor, s: f32) -> Tensor {
    if s == 1.0 {
        t.clone()
    } else {
        t.map(|x| x * s)
    }
}

/// Backpropagate through the model, adding every parameter gradient into
/// `grads` (shaped like `params`).
///
/// `grad_scale` multiplies the loss gradient; gradient accumulation over
/// `k` micro-batches uses `1/k`. `opts` must be the options forward ran
/// with.
pub fn backward(
    cfg: &ModelConfig,
    params: &Params,
    saved: &Saved,
    opts: &RunOptions,
    grads: &mut Params,
    accum: AccumCtx,
    grad_scale: f32,
) -> Result<(), ModelError> {
    if *opts != saved.options {
        return Err(ModelError::OptionsMismatch);
    }
    let prec = &opts.precision;
    let store = prec.storage();
    let dims = attn_dims(cfg, saved.batch, saved.seq);
    let rope = RopeTable::new(saved.seq, cfg.head_dim());
    let (qc, kc) = (cfg.n_heads * cfg.head_dim(), cfg.n_kv_heads * cfg.head_dim());

    // LM head: gradients came out of the fused cross-entropy pass.
    let d_lm = scaled(&saved.head.d_lm_w, grad_scale);
    let dz = scaled(&saved.head.d_hidden, grad_scale).stored(store);
    let (dr, dln_f) = rmsnorm_backward(&saved.final_residual, &saved.final_rstd, &params.ln_f, &dz)?;
    accum.add("ln_f", &mut grads.ln_f, &dln_f);
    match &mut grads.lm_head {
        Some(h) => accum.add("lm_head", h, &d_lm),
        None => accum.add("lm_head", &mut grads.embed, &d_lm),
    }
    let mut d_stream = dr.stored(store);

    for l in (0..cfg.n_layers).rev() {
        let site = |s: &str| format!("layers.{l}.{s}.grad");
        let lp = &params.layers[l];
        let st = saved.stats.layers[l];
        let act = rebuild(cfg, params, saved, l, &rope)?;

        // FFN
        let s_in = match &act.swiglu {
            SwigluInput::Dense(s) => SavedInput::Dense(s, st.swiglu),
            SwigluInput::Quant(q) => SavedInput::Quant(q.clone()),
        };
        let (ds, dwd) = linear::backward(&d_stream, s_in, &lp.wd, prec)?;
        let dgu = swiglu_backward(&act.gate_up, &ds)?.stored(store);
        let (db, dwgu) = linear::backward(&dgu, SavedInput::Dense(&act.norm2.0, st.norm2), &lp.wgu, prec)?;
        let (dmid_n, dln2) = rmsnorm_backward(&act.mid_residual, &act.norm2.1, &lp.ln2, &db)?;
        let d_mid = residual_add(&dmid_n, &d_stream, store)?;
        check_finite(&d_mid, site("mid_residual"))?;

        // attention
        let (datt, dwo) = linear::backward(&d_mid, SavedInput::Dense(&act.attn.0, st.attn), &lp.wo, prec)?;
        let g = sdpa_backward_chunked(
            &act.q, &act.k, &act.v, &act.attn.0, &act.attn.1, &datt, dims, opts.attn_chunk,
        )?;
        let (mut dq, mut dk, dv) = (g.dq.stored(store), g.dk.stored(store), g.dv.stored(store));
        rope.apply(&mut dq, saved.seq, 0, cfg.n_heads, true, store);
        rope.apply(&mut dk, saved.seq, 0, cfg.n_kv_heads, true, store);
        let mut dqkv = Tensor::zeros(&act.qkv.shape);
        for r in 0..dqkv.rows() {
            let dst = dqkv.row_mut(r);
            dst[..qc].copy_from_slice(dq.row(r));
            dst[qc..qc + kc].copy_from_slice(dk.row(r));
            dst[qc + kc..].copy_from_slice(dv.row(r));
        }
        let (da, dwqkv) = linear::backward(&dqkv, SavedInput::Dense(&act.norm1.0, st.norm1), &lp.wqkv, prec)?;
        let (dres_n, dln1) = rmsnorm_backward(&saved.layers[l].residual, &act.norm1.1, &lp.ln1, &da)?;
        d_stream = residual_add(&dres_n, &d_mid, store)?;
        check_finite(&d_stream, site("residual"))?;

        let gl = &mut grads.layers[l];
        for (name, buf, g) in [
            ("wd", &mut gl.wd, &dwd),
            ("wgu", &mut gl.wgu, &dwgu),
            ("ln2", &mut gl.ln2, &dln2),
            ("wo", &mut gl.wo, &dwo),
            ("wqkv", &mut gl.wqkv, &dwqkv),
            ("ln1", &mut gl.ln1, &dln1),
        ] {
            accum.add(&format!("layers.{l}.{name}"), buf, g);
        }
    }

    let demb = embedding_backward_sorted(&saved.inputs, &d_stream, cfg.vocab)?;
    accum.add("embed", &mut grads.embed, &demb);
    Ok(())
}

//! f64 reference model and the finite-difference gradient check built on it.

use qtrain_core::model::{Batch, ModelConfig, Params};

use super::{central_diff64, max_rel_err, widen};

/// Straight-line f64 forward pass of the same architecture.
pub struct Ref<'a> {
    pub cfg: &'a ModelConfig,
    pub batch: &'a Batch,
}

fn matvec_t(x: &[f64], w: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    (0..out_dim).map(|o| (0..in_dim).map(|i| x[i] * w[o * in_dim + i]).sum()).collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(a, b)| a * r * b).collect()
}

impl Ref<'_> {
    /// Mean token loss with parameters given as a flat list in `named()` order.
    pub fn loss(&self, p: &[Vec<f64>]) -> f64 {
        let cfg = self.cfg;
        let (d, hd, h, hkv) = (cfg.d_model, cfg.head_dim(), cfg.n_heads, cfg.n_kv_heads);
        let (t_len, nb) = (self.batch.seq, self.batch.batch);
        let half = hd / 2;
        let embed = &p[0];
        let mut total = 0.0;
        for b in 0..nb {
            let mut x: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    let id = self.batch.inputs[b * t_len + t] as usize;
                    embed[id * d..(id + 1) * d].to_vec()
                })
                .collect();
            for l in 0..cfg.n_layers {
                let w = &p[1 + 6 * l..1 + 6 * (l + 1)];
                let (ln1, wqkv, wo, ln2, wgu, wd) = (&w[0], &w[1], &w[2], &w[3], &w[4], &w[5]);
                let qkv: Vec<Vec<f64>> = x.iter().map(|r| matvec_t(&rms(r, ln1), wqkv, cfg.qkv_dim(), d)).collect();
                let rot = |v: &[f64], pos: usize, heads: usize| {
                    let mut out = v.to_vec();
                    for hh in 0..heads {
                        for i in 0..half {
                            let f = (10_000f64).powf(-((2 * i) as f64) / hd as f64);
                            let (c, s) = ((pos as f64 * f).cos(), (pos as f64 * f).sin());
                            let (a, bb) = (v[hh * hd + i], v[hh * hd + half + i]);
                            out[hh * hd + i] = a * c - bb * s;
                            out[hh * hd + half + i] = a * s + bb * c;
                        }
                    }
                    out
                };
                let q: Vec<Vec<f64>> = (0..t_len).map(|t| rot(&qkv[t][..h * hd], t, h)).collect();
                let k: Vec<Vec<f64>> = (0..t_len).map(|t| rot(&qkv[t][h * hd..(h + hkv) * hd], t, hkv)).collect();
                let v: Vec<&[f64]> = (0..t_len).map(|t| &qkv[t][(h + hkv) * hd..]).collect();
                let mut att = vec![vec![0.0; h * hd]; t_len];
                for hh in 0..h {
                    let kh = hh / (h / hkv);
                    for i in 0..t_len {
                        let s: Vec<f64> = (0..=i)
                            .map(|j| {
                                (0..hd).map(|e| q[i][hh * hd + e] * k[j][kh * hd + e]).sum::<f64>() / (hd as f64).sqrt()
                            })
                            .collect();
                        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                        for e in 0..hd {
                            att[i][hh * hd + e] = (0..=i).map(|j| (s[j] - m).exp() / z * v[j][kh * hd + e]).sum();
                        }
                    }
                }
                for t in 0..t_len {
                    let o = matvec_t(&att[t], wo, d, h * hd);
                    let mid: Vec<f64> = x[t].iter().zip(&o).map(|(a, b)| a + b).collect();
                    let gu = matvec_t(&rms(&mid, ln2), wgu, cfg.d_ff, d);
                    let ff = cfg.ffn_hidden();
                    let s: Vec<f64> = (0..ff).map(|j| gu[j] / (1.0 + (-gu[j]).exp()) * gu[ff + j]).collect();
                    let f = matvec_t(&s, wd, d, ff);
                    x[t] = mid.iter().zip(&f).map(|(a, b)| a + b).collect();
                }
            }
            let ln_f = &p[1 + 6 * cfg.n_layers];
            let head = &p[2 + 6 * cfg.n_layers];
            for t in 0..t_len {
                let logits = matvec_t(&rms(&x[t], ln_f), head, cfg.vocab, d);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                total += lse - logits[self.batch.targets[b * t_len + t] as usize];
            }
        }
        total / (nb * t_len) as f64
    }
}

/// Largest relative error per parameter tensor between `grads` and central
/// differences of the reference loss, plus |reference loss - `loss`|.
pub fn fd_errors(cfg: &ModelConfig, params: &Params, batch: &Batch, loss: f32, grads: &Params) -> (Vec<(String, f64)>, f64) {
    let reference = Ref { cfg, batch };
    let flat: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| widen(&t.data)).collect();
    let loss_gap = (reference.loss(&flat) - loss as f64).abs();
    let mut out = Vec::new();
    for (ti, (name, gt)) in grads.named().iter().enumerate() {
        let numeric: Vec<f64> = (0..gt.len())
            .map(|i| {
                let mut f = |x: &[f64]| {
                    let mut pp = flat.clone();
                    pp[ti] = x.to_vec();
                    reference.loss(&pp)
                };
                central_diff64(&mut f, &flat[ti], i, 1e-3)
            })
            .collect();
        out.push((name.clone(), max_rel_err(&gt.data, &numeric, 1e-3)));
    }
    (out, loss_gap)
}

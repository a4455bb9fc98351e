//! Rotary position embeddings on the half-split layout: dimension `i` pairs
//! with `i + Dh/2` inside every head. All arithmetic is f32.

use crate::tensorops::{Storage, Tensor};

pub const ROPE_BASE: f32 = 10_000.0;

pub struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(seq: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let inv_freq = ROPE_BASE.powf(-((2 * i) as f32) / head_dim as f32);
                let angle = pos as f32 * inv_freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotate `cols` starting at `col0` of a `[B*T, *]` tensor, in place.
    /// `inverse` applies the transpose rotation (used for gradients).
    pub fn apply(&self, x: &mut Tensor, seq: usize, col0: usize, heads: usize, inverse: bool, store: Storage) {
        let (half, hd) = (self.half, 2 * self.half);
        let cols = x.cols();
        let sign = if inverse { -1.0 } else { 1.0 };
        for row in 0..x.rows() {
            let pos = row % seq;
            let (c, s) = (&self.cos[pos * half..][..half], &self.sin[pos * half..][..half]);
            for h in 0..heads {
                let base = row * cols + col0 + h * hd;
                for i in 0..half {
                    let (a, b) = (x.data[base + i], x.data[base + half + i]);
                    let si = sign * s[i];
                    x.data[base + i] = store.store(a * c[i] - b * si);
                    x.data[base + half + i] = store.store(a * si + b * c[i]);
                }
            }
        }
    }
}

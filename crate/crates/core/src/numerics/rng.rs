//! Stateless counter-based random numbers (Philox4x32-10).
//!
//! A draw is a pure function of `(seed, stream, counter)`; there is no
//! generator state to carry around, so any element of any tensor can draw
//! its own bits independently of evaluation order.

use serde::{Deserialize, Serialize};

const MUL_0: u32 = 0xD251_1F53;
const MUL_1: u32 = 0xCD9E_8D57;
const WEYL_0: u32 = 0x9E37_79B9;
const WEYL_1: u32 = 0xBB67_AE85;
const ROUNDS: usize = 10;

/// Address of one random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl RngKey {
    pub const fn new(seed: u64, stream: u64, counter: u64) -> Self {
        Self { seed, stream, counter }
    }

    pub const fn with_counter(self, counter: u64) -> Self {
        Self { counter, ..self }
    }
}

#[inline(always)]
fn round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let p0 = (ctr[0] as u64).wrapping_mul(MUL_0 as u64);
    let p1 = (ctr[2] as u64).wrapping_mul(MUL_1 as u64);
    [
        ((p1 >> 32) as u32) ^ ctr[1] ^ key[0],
        p1 as u32,
        ((p0 >> 32) as u32) ^ ctr[3] ^ key[1],
        p0 as u32,
    ]
}

/// Raw Philox4x32-10 block function.
pub fn philox4x32(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for _ in 0..ROUNDS {
        c = round(c, k);
        k[0] = k[0].wrapping_add(WEYL_0);
        k[1] = k[1].wrapping_add(WEYL_1);
    }
    c
}

/// All four output words for a key. Counter occupies the low two words,
/// stream the high two, seed is the cipher key.
pub fn rng_block(key: RngKey) -> [u32; 4] {
    let ctr = [
        key.counter as u32,
        (key.counter >> 32) as u32,
        key.stream as u32,
        (key.stream >> 32) as u32,
    ];
    philox4x32(ctr, [key.seed as u32, (key.seed >> 32) as u32])
}

/// One uniformly distributed 32-bit word.
pub fn rng_uniform(key: RngKey) -> u32 {
    rng_block(key)[0]
}

/// Uniform float in `[0, 1)` with 24 bits of resolution.
pub fn rng_unit_f32(key: RngKey) -> f32 {
    (rng_uniform(key) >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Standard normal via Box-Muller on two words of the same block.
pub fn rng_normal(key: RngKey) -> f32 {
    let b = rng_block(key);
    let u1 = ((b[0] >> 8) as f64 + 1.0) / (1u64 << 24) as f64;
    let u2 = (b[1] >> 8) as f64 / (1u64 << 24) as f64;
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// FNV-1a, used to turn names into stream ids.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::numerics::{absmax, round_bf16};

/// Row-major f32 tensor. Storage precision is decided by whoever writes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimensions flattened into rows.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix { op, shape: self.shape.clone() }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn stored(mut self, store: Storage) -> Tensor {
        store.apply(&mut self.data);
        self
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn nbytes_f32(&self) -> usize {
        self.data.len() * 4
    }
}

/// How op outputs are stored: rounded to BF16, or kept at f32 (reference mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Storage {
    Bf16,
    F32,
}

impl Storage {
    #[inline]
    pub fn store(self, x: f32) -> f32 {
        match self {
            Storage::Bf16 => round_bf16(x),
            Storage::F32 => x,
        }
    }

    pub fn apply(self, xs: &mut [f32]) {
        if self == Storage::Bf16 {
            for x in xs {
                *x = round_bf16(*x);
            }
        }
    }

    pub fn bytes_per_elem(self) -> usize {
        match self {
            Storage::Bf16 => 2,
            Storage::F32 => 4,
        }
    }
}

/// Op output together with the absmax computed in the same pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOut {
    pub value: Tensor,
    pub absmax: f32,
}

impl FusedOut {
    pub(crate) fn new(value: Tensor) -> Result<Self, TensorError> {
        let absmax = absmax(&value.data)?;
        Ok(Self { value, absmax })
    }
}

//! Dense fp64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain row-major value. Differentiation happens on a
//! [`Tape`]: every operation appends a node, and [`Tape::backward`] walks the
//! nodes in strict reverse append order. Gradients of leaves marked as
//! requiring them accumulate across calls until [`Tape::zero_grad`].

mod kernels;
mod tape;

pub use kernels::{log_softmax_rows, matmul_into, softmax_rows};
pub use tape::{Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `ln(max(p, LOG_CLAMP))`, except that NaN stays NaN so a diverged
/// softmax is not reported as a finite loss.
pub fn clamped_ln(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(LOG_CLAMP).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples every entry from `Normal(0, std)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the shape and the exact bit patterns of the data.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(self) -> u64 {
        self.0
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    kernels::softmax_inplace(&mut out);
    out
}

/// `-Σ target_i · ln(max(p_i, 1e-12))` for two probability vectors.
pub fn cross_entropy(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return Err(Error::shape(format!(
            "cross entropy over {} and {} classes",
            p.len(),
            target.len()
        )));
    }
    for (name, v) in [("prediction", p), ("target", target)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < 0.0) {
            return Err(Error::contract(format!(
                "{name} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(-p
        .iter()
        .zip(target)
        .map(|(&pi, &ti)| ti * clamped_ln(pi))
        .sum::<f64>())
}

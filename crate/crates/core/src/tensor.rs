//! Dense row-major f32 buffers and the handful of kernels the layer stack needs.
//!
//! All reductions run sequentially in index order so results are bit-stable
//! across thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LuqError, Result};

/// Row-major 2-D f32 matrix. Linear weights are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LuqError::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// `x · Wᵀ` for `x: [n, in]` given as a flat slice, `self: [out, in]`.
    pub fn apply(&self, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.cols);
        let mut out = vec![0.0f32; n * self.rows];
        for t in 0..n {
            let xr = &x[t * self.cols..(t + 1) * self.cols];
            let yr = &mut out[t * self.rows..(t + 1) * self.rows];
            for (o, y) in yr.iter_mut().enumerate() {
                *y = dot(self.row(o), xr);
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

pub const RMS_EPS: f32 = 1e-6;

/// Parameter-free RMS normalisation of each `dim`-wide row.
pub fn rms_norm(x: &[f32], dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let ms = src.iter().map(|v| v * v).sum::<f32>() / dim as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s * inv;
        }
    }
    out
}

/// Activations of a batch of sequences, `[batch, seq_len, dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn zeros(batch: usize, seq_len: usize, dim: usize) -> Self {
        Self { batch, seq_len, dim, data: vec![0.0; batch * seq_len * dim] }
    }

    pub fn from_vec(batch: usize, seq_len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != batch * seq_len * dim {
            return Err(LuqError::shape(format!(
                "{} values for activations [{batch}, {seq_len}, {dim}]",
                data.len()
            )));
        }
        Ok(Self { batch, seq_len, dim, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.seq_len, self.dim]
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn sequence(&self, b: usize) -> &[f32] {
        let n = self.seq_len * self.dim;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn token(&self, b: usize, t: usize) -> &[f32] {
        let off = (b * self.seq_len + t) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// SplitMix64 finaliser, used to derive independent RNG streams from a seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_matches_manual_product() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let y = w.apply(&[1.0, 1.0, 1.0, 2.0, 0.0, -1.0], 2);
        assert_eq!(y, vec![6.0, 0.0, -1.0, -3.0]);
    }

    #[test]
    fn rms_norm_unit_rms() {
        let y = rms_norm(&[3.0, 4.0], 2);
        let ms = (y[0] * y[0] + y[1] * y[1]) / 2.0;
        assert!((ms - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mixed_seeds_differ_per_stream() {
        assert_ne!(mix_seed(7, 0), mix_seed(7, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}

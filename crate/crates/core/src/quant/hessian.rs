use rayon::prelude::*;

use crate::error::{LuqError, Result};

const CHUNK: usize = 256;

/// Running `H = Σ x xᵀ` over the inputs of one linear, accumulated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    dim: usize,
    count: usize,
    h: Vec<f64>,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, count: 0, h: vec![0.0; dim * dim] }
    }

    pub fn from_matrix(dim: usize, h: Vec<f64>) -> Result<Self> {
        if h.len() != dim * dim {
            return Err(LuqError::shape(format!("{} entries for a {dim}x{dim} Hessian", h.len())));
        }
        Ok(Self { dim, count: 0, h })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }

    /// Add `n` row vectors given as a flat `[n, dim]` slice.
    ///
    /// Partial sums are formed over fixed-size token chunks and reduced in
    /// chunk order, so the result does not depend on the thread count.
    pub fn add_batch(&mut self, xs: &[f32], n: usize) -> Result<()> {
        if xs.len() != n * self.dim {
            return Err(LuqError::shape(format!(
                "input width mismatch: {} values for {n} rows of width {}",
                xs.len(),
                self.dim
            )));
        }
        let dim = self.dim;
        let partials: Vec<Vec<f64>> = xs
            .par_chunks(CHUNK * dim.max(1))
            .map(|chunk| {
                let mut p = vec![0.0f64; dim * dim];
                for x in chunk.chunks_exact(dim) {
                    for i in 0..dim {
                        let xi = x[i] as f64;
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &mut p[i * dim..(i + 1) * dim];
                        for j in i..dim {
                            row[j] += xi * x[j] as f64;
                        }
                    }
                }
                p
            })
            .collect();
        for p in partials {
            for i in 0..dim {
                for j in i..dim {
                    self.h[i * dim + j] += p[i * dim + j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                self.h[i * dim + j] = self.h[j * dim + i];
            }
        }
        self.count += n;
        Ok(())
    }

    pub fn add(&mut self, x: &[f32]) -> Result<()> {
        self.add_batch(x, 1)
    }

    /// `tr(ΔW H ΔWᵀ)` for a row-major `[rows, dim]` weight delta.
    pub fn proxy_loss(&self, delta: &[f64], rows: usize) -> f64 {
        let d = self.dim;
        let mut total = 0.0;
        for r in 0..rows {
            let dr = &delta[r * d..(r + 1) * d];
            for i in 0..d {
                if dr[i] == 0.0 {
                    continue;
                }
                let hrow = &self.h[i * d..(i + 1) * d];
                let s: f64 = hrow.iter().zip(dr).map(|(h, x)| h * x).sum();
                total += dr[i] * s;
            }
        }
        total
    }
}

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
pub(crate) fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag.is_finite() && diag > 0.0) {
            return Err(LuqError::SingularHessian { column: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub(crate) fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    // inv(L) by forward substitution, column by column.
    let mut linv = vec![0.0f64; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    // A⁻¹ = inv(L)ᵀ inv(L)
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in j..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Ok(inv)
}

/// Damped Hessian, inverse and the upper Cholesky factor of the inverse
/// that drives column-wise error compensation.
pub(crate) struct InverseHessian {
    pub inverse: Vec<f64>,
    pub upper: Vec<f64>,
    /// Columns whose Hessian diagonal was zero (inputs never active).
    pub dead: Vec<bool>,
}

pub(crate) fn prepare_inverse(h: &HessianAccumulator, damp: f64) -> Result<InverseHessian> {
    let n = h.dim();
    let mut a = h.matrix().to_vec();
    let mut dead = vec![false; n];
    for j in 0..n {
        if a[j * n + j] == 0.0 {
            a[j * n + j] = 1.0;
            dead[j] = true;
        }
    }
    let mean_diag = (0..n).map(|j| a[j * n + j]).sum::<f64>() / n.max(1) as f64;
    let lambda = damp * mean_diag;
    for j in 0..n {
        a[j * n + j] += lambda;
    }
    let inverse = spd_inverse(&a, n)?;
    let l = cholesky_lower(&inverse, n)?;
    let mut upper = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            upper[i * n + j] = l[j * n + i];
        }
    }
    Ok(InverseHessian { inverse, upper, dead })
}

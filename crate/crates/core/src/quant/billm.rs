//! Residual binarization with structured salient columns and a two-group
//! magnitude split for the remaining weights.

use rayon::prelude::*;

use super::hessian::{prepare_inverse, HessianAccumulator};
use super::{bin_plain_value, bin_salient_value, pack, QuantMethod, QuantizedTensor, BIN_SCALES_PER_BLOCK};
use crate::error::{LuqError, Result};
use crate::tensor::Matrix;

#[inline]
fn sign_bit(v: f64) -> bool {
    v >= 0.0
}

fn mean_abs(w: &[f64]) -> f64 {
    if w.is_empty() {
        0.0
    } else {
        w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
    }
}

/// One sign-and-scale pass: `β = mean|w|`, reconstruction `β·sign(w)`.
pub fn binarize_group(w: &[f32]) -> (f32, Vec<f32>) {
    let wd: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let beta = mean_abs(&wd) as f32;
    let recon = wd.iter().map(|&v| if sign_bit(v) { beta } else { -beta }).collect();
    (beta, recon)
}

/// Two sign-and-scale passes, the second on the residual of the first.
/// Returns `(α₁, α₂, reconstruction)`.
pub fn residual_binarize(w: &[f32]) -> (f32, f32, Vec<f32>) {
    let wd: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let (a1, a2, s1, s2) = residual_pass(&wd);
    let recon = s1.iter().zip(&s2).map(|(&x, &y)| bin_salient_value(a1, a2, x, y)).collect();
    (a1, a2, recon)
}

fn residual_pass(w: &[f64]) -> (f32, f32, Vec<bool>, Vec<bool>) {
    let a1 = mean_abs(w) as f32;
    let s1: Vec<bool> = w.iter().map(|&v| sign_bit(v)).collect();
    let r: Vec<f64> = w
        .iter()
        .zip(&s1)
        .map(|(&v, &s)| v - if s { a1 as f64 } else { -(a1 as f64) })
        .collect();
    let a2 = mean_abs(&r) as f32;
    let s2 = r.iter().map(|&v| sign_bit(v)).collect();
    (a1, a2, s1, s2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitResult {
    /// Magnitudes `>= threshold` form the high group.
    pub threshold: f32,
    pub lo_scale: f32,
    pub hi_scale: f32,
    /// Number of weights in the low group.
    pub n_lo: usize,
    /// Binarization squared error of the chosen split.
    pub sse: f64,
}

/// Exhaustive search over magnitude splits of `w`, each side binarized with
/// its mean magnitude. Minimal squared error wins; ties go to the smaller
/// low group. A single group is reported as everything-high.
pub fn split_search(w: &[f32]) -> SplitResult {
    let mut a: Vec<f64> = w.iter().map(|v| v.abs() as f64).collect();
    a.sort_by(|x, y| x.total_cmp(y));
    let n = a.len();
    if n == 0 {
        return SplitResult { threshold: 0.0, lo_scale: 0.0, hi_scale: 0.0, n_lo: 0, sse: 0.0 };
    }
    let mut s1 = vec![0.0f64; n + 1];
    let mut s2 = vec![0.0f64; n + 1];
    for i in 0..n {
        s1[i + 1] = s1[i] + a[i];
        s2[i + 1] = s2[i] + a[i] * a[i];
    }
    let sse = |lo: usize, hi: usize| -> f64 {
        let m = (hi - lo) as f64;
        if m == 0.0 {
            return 0.0;
        }
        let s = s1[hi] - s1[lo];
        (s2[hi] - s2[lo]) - s * s / m
    };
    let mut best_m = 0;
    let mut best = sse(0, n);
    for m in 1..n {
        if a[m - 1] == a[m] {
            continue;
        }
        let e = sse(0, m) + sse(m, n);
        if e < best {
            best = e;
            best_m = m;
        }
    }
    let mean = |lo: usize, hi: usize| if hi > lo { ((s1[hi] - s1[lo]) / (hi - lo) as f64) as f32 } else { 0.0 };
    SplitResult {
        threshold: a[best_m] as f32,
        lo_scale: mean(0, best_m),
        hi_scale: mean(best_m, n),
        n_lo: best_m,
        sse: best.max(0.0),
    }
}

/// Salient columns for a block of width `width` under `fraction`.
pub fn salient_count(width: usize, fraction: f64) -> usize {
    ((fraction * width as f64).round() as usize).min(width)
}

struct RowBlock {
    signs: Vec<bool>,
    resid: Vec<bool>,
    split: Vec<bool>,
    scales: [f32; BIN_SCALES_PER_BLOCK],
}

/// Binarize one row restricted to a block. `is_sal[c]` marks salient
/// columns of the block; returns the payload and the reconstruction.
fn binarize_row_block(w: &[f64], is_sal: &[bool]) -> (RowBlock, Vec<f32>) {
    let sal: Vec<f64> = w.iter().zip(is_sal).filter(|(_, &s)| s).map(|(&v, _)| v).collect();
    let plain: Vec<f32> = w.iter().zip(is_sal).filter(|(_, &s)| !s).map(|(&v, _)| v as f32).collect();
    let (a1, a2, ss1, ss2) = residual_pass(&sal);
    let split = split_search(&plain);

    let mut signs = Vec::with_capacity(w.len());
    let mut flags = Vec::with_capacity(plain.len());
    let mut recon = Vec::with_capacity(w.len());
    let (mut ks, mut kp) = (0, 0);
    for (c, &v) in w.iter().enumerate() {
        if is_sal[c] {
            let (x, y) = (ss1[ks], ss2[ks]);
            ks += 1;
            signs.push(x);
            recon.push(bin_salient_value(a1, a2, x, y));
        } else {
            let p = plain[kp];
            kp += 1;
            let s = sign_bit(v);
            let hi = p.abs() >= split.threshold;
            signs.push(s);
            flags.push(hi);
            recon.push(bin_plain_value(split.lo_scale, split.hi_scale, s, hi));
        }
    }
    let block = RowBlock {
        signs,
        resid: ss2,
        split: flags,
        scales: [a1, a2, split.lo_scale, split.hi_scale, split.threshold],
    };
    (block, recon)
}

/// Blockwise binarization with GPTQ-style error compensation.
///
/// For every block of `block_size` columns the salient columns are the
/// top `salient_fraction` by `Σ_rows w² / [H⁻¹]_jj` (lower index on ties),
/// computed on the weights as updated by earlier blocks.
pub fn billm_binarize(
    w: &Matrix,
    h: &HessianAccumulator,
    block_size: usize,
    damp: f64,
    salient_fraction: f64,
) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(LuqError::invalid("block_size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&salient_fraction) {
        return Err(LuqError::invalid("salient_fraction must lie in [0, 1]"));
    }
    if h.dim() != w.cols {
        return Err(LuqError::shape(format!("Hessian width {} for a weight with {} columns", h.dim(), w.cols)));
    }
    let (rows, cols) = (w.rows, w.cols);
    let inv = prepare_inverse(h, damp)?;
    let u = &inv.upper;
    let nb = cols.div_ceil(block_size);

    let mut wf: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            w.row(r)
                .iter()
                .enumerate()
                .map(|(c, &v)| if inv.dead[c] { 0.0 } else { v as f64 })
                .collect()
        })
        .collect();

    let mut salient: Vec<u32> = Vec::new();
    let mut blocks: Vec<Vec<RowBlock>> = Vec::with_capacity(nb);
    for b0 in (0..cols).step_by(block_size) {
        let b1 = (b0 + block_size).min(cols);
        let width = b1 - b0;
        let mut sens = vec![0.0f64; width];
        for row in &wf {
            for (j, s) in sens.iter_mut().enumerate() {
                *s += row[b0 + j] * row[b0 + j];
            }
        }
        for (j, s) in sens.iter_mut().enumerate() {
            let c = b0 + j;
            *s /= inv.inverse[c * cols + c];
        }
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| sens[b].total_cmp(&sens[a]).then(a.cmp(&b)));
        let mut is_sal = vec![false; width];
        for &j in &order[..salient_count(width, salient_fraction)] {
            is_sal[j] = true;
        }
        salient.extend((0..width).filter(|&j| is_sal[j]).map(|j| (b0 + j) as u32));

        let row_blocks: Vec<RowBlock> = wf
            .par_iter_mut()
            .map(|wr| {
                let (rb, q) = binarize_row_block(&wr[b0..b1], &is_sal);
                let mut err = vec![0.0f64; width];
                for i in b0..b1 {
                    let e = (wr[i] - q[i - b0] as f64) / u[i * cols + i];
                    err[i - b0] = e;
                    for j in i + 1..b1 {
                        wr[j] -= e * u[i * cols + j];
                    }
                }
                for j in b1..cols {
                    let mut s = 0.0;
                    for i in b0..b1 {
                        s += err[i - b0] * u[i * cols + j];
                    }
                    wr[j] -= s;
                }
                rb
            })
            .collect();
        blocks.push(row_blocks);
    }

    let ns = salient.len();
    let mut signs = Vec::with_capacity(rows * cols);
    let mut resid = Vec::with_capacity(rows * ns);
    let mut split = Vec::with_capacity(rows * (cols - ns));
    let mut scales = Vec::with_capacity(rows * nb * BIN_SCALES_PER_BLOCK);
    for r in 0..rows {
        for blk in &blocks {
            let rb = &blk[r];
            signs.extend_from_slice(&rb.signs);
            resid.extend_from_slice(&rb.resid);
            split.extend_from_slice(&rb.split);
            scales.extend_from_slice(&rb.scales);
        }
    }
    Ok(QuantizedTensor {
        method: QuantMethod::Bin,
        rows,
        cols,
        bits: 1,
        group_size: block_size,
        codes: pack::pack_bits(&signs),
        scales,
        salient,
        residual: pack::pack_bits(&resid),
        split: pack::pack_bits(&split),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn sse(w: &[f32], r: &[f32]) -> f64 {
        w.iter().zip(r).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
    }

    #[test]
    fn three_value_group() {
        let w = [1.0, -1.0, 3.0];
        let (beta, r) = binarize_group(&w);
        assert!((beta - 5.0 / 3.0).abs() < 1e-6);
        assert_eq!(r, vec![beta, -beta, beta]);
        // coarse 1-D search over β agrees with the closed form
        let best = (1..=4000)
            .map(|i| i as f32 * 1e-3)
            .min_by(|a, b| {
                let ea = sse(&w, &[*a, -*a, *a]);
                let eb = sse(&w, &[*b, -*b, *b]);
                ea.total_cmp(&eb)
            })
            .unwrap();
        assert!((best - beta).abs() <= 1e-3);
    }

    #[test]
    fn equal_magnitudes_need_no_residual() {
        let w = [0.5, -0.5, 0.5, 0.5, -0.5];
        let (a1, a2, r) = residual_binarize(&w);
        assert_eq!(a1, 0.5);
        assert_eq!(a2, 0.0);
        assert_eq!(r, w.to_vec());
    }

    #[test]
    fn split_matches_brute_force() {
        let mut rng = crate::tensor::rng_for(4, 0);
        for _ in 0..20 {
            let w: Vec<f32> = (0..17).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = split_search(&w);
            let mut best = f64::INFINITY;
            for &t in &w {
                let t = t.abs();
                let lo: Vec<f32> = w.iter().filter(|v| v.abs() < t).map(|v| v.abs()).collect();
                let hi: Vec<f32> = w.iter().filter(|v| v.abs() >= t).map(|v| v.abs()).collect();
                let m = |g: &[f32]| if g.is_empty() { 0.0 } else { g.iter().sum::<f32>() / g.len() as f32 };
                let e: f64 = lo.iter().map(|v| ((v - m(&lo)) as f64).powi(2)).sum::<f64>()
                    + hi.iter().map(|v| ((v - m(&hi)) as f64).powi(2)).sum::<f64>();
                best = best.min(e);
            }
            assert!((s.sse - best).abs() < 1e-4, "{} vs {}", s.sse, best);
        }
    }

    #[test]
    fn group_scales_are_locally_optimal() {
        let mut rng = crate::tensor::rng_for(8, 0);
        let w: Vec<f32> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = split_search(&w);
        let err = |lo: f32, hi: f32| -> f64 {
            w.iter()
                .map(|v| {
                    let b = if v.abs() >= s.threshold { hi } else { lo };
                    ((v.abs() - b) as f64).powi(2)
                })
                .sum()
        };
        let base = err(s.lo_scale, s.hi_scale);
        for f in [0.99f32, 1.01] {
            assert!(err(s.lo_scale * f, s.hi_scale) > base);
            assert!(err(s.lo_scale, s.hi_scale * f) > base);
        }
    }

    #[test]
    fn realized_bits_in_window() {
        let mut rng = crate::tensor::rng_for(1, 0);
        let data = (0..64 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = Matrix::from_vec(64, 64, data).unwrap();
        let mut h = HessianAccumulator::new(64);
        let xs: Vec<f32> = (0..256 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
        h.add_batch(&xs, 256).unwrap();
        let q = billm_binarize(&w, &h, 128, 0.01, 0.08).unwrap();
        let b = q.bits_per_weight();
        assert!((1.05..=1.15).contains(&b), "{b}");
        assert_eq!(q.salient.len(), 5);
        let d = q.dequantize().unwrap();
        assert_eq!(q.repack(&d).unwrap(), q);
    }
}

//! Symmetric integer-grid quantizers: plain round-to-nearest and GPTQ.

use rayon::prelude::*;

use super::hessian::{prepare_inverse, HessianAccumulator};
use super::{pack, QuantMethod, QuantizedTensor};
use crate::error::{LuqError, Result};
use crate::tensor::Matrix;

/// Largest positive code of a symmetric `bits`-bit grid.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub(crate) fn group_scale(values: impl Iterator<Item = f32>, qm: i32) -> f32 {
    let m = values.fold(0.0f32, |m, v| m.max(v.abs()));
    m / qm as f32
}

pub(crate) fn quantize_value(w: f64, scale: f32, qm: i32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    (w / scale as f64).round().clamp(-(qm as f64), qm as f64) as i8
}

fn check_bits(bits: u8, group_size: usize) -> Result<()> {
    if !(2..=4).contains(&bits) {
        return Err(LuqError::invalid(format!("grid bits must be 2, 3 or 4, got {bits}")));
    }
    if group_size == 0 {
        return Err(LuqError::invalid("group_size must be >= 1"));
    }
    Ok(())
}

fn grid_tensor(method: QuantMethod, w: &Matrix, bits: u8, group_size: usize, codes: Vec<i8>, scales: Vec<f32>) -> QuantizedTensor {
    QuantizedTensor {
        method,
        rows: w.rows,
        cols: w.cols,
        bits,
        group_size,
        codes: pack::pack_nibbles(&codes),
        scales,
        salient: Vec::new(),
        residual: Vec::new(),
        split: Vec::new(),
    }
}

pub fn rtn_quantize(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedTensor> {
    check_bits(bits, group_size)?;
    let qm = qmax(bits);
    let ng = w.cols.div_ceil(group_size);
    let mut codes = vec![0i8; w.numel()];
    let mut scales = vec![0.0f32; w.rows * ng];
    for r in 0..w.rows {
        let row = w.row(r);
        for g in 0..ng {
            let span = g * group_size..((g + 1) * group_size).min(w.cols);
            let s = group_scale(row[span.clone()].iter().copied(), qm);
            scales[r * ng + g] = s;
            for c in span {
                codes[r * w.cols + c] = quantize_value(row[c] as f64, s, qm);
            }
        }
    }
    Ok(grid_tensor(QuantMethod::Rtn, w, bits, group_size, codes, scales))
}

/// GPTQ with lazy block updates. Columns are visited left to right; the
/// quantization error of each column is pushed onto the remaining columns
/// through the upper Cholesky factor of the damped inverse Hessian.
pub fn gptq_quantize(
    w: &Matrix,
    h: &HessianAccumulator,
    bits: u8,
    block_size: usize,
    group_size: usize,
    damp: f64,
) -> Result<QuantizedTensor> {
    check_bits(bits, group_size)?;
    if block_size == 0 {
        return Err(LuqError::invalid("block_size must be >= 1"));
    }
    if h.dim() != w.cols {
        return Err(LuqError::shape(format!("Hessian width {} for a weight with {} columns", h.dim(), w.cols)));
    }
    let (rows, cols) = (w.rows, w.cols);
    let inv = prepare_inverse(h, damp)?;
    let u = &inv.upper;
    let qm = qmax(bits);
    let ng = cols.div_ceil(group_size);

    let per_row: Vec<(Vec<i8>, Vec<f32>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut wr: Vec<f64> = w.row(r).iter().map(|&v| v as f64).collect();
            for (c, dead) in inv.dead.iter().enumerate() {
                if *dead {
                    wr[c] = 0.0;
                }
            }
            let mut codes = vec![0i8; cols];
            let mut scales = vec![0.0f32; ng];
            let mut err = vec![0.0f64; block_size];
            let mut scale = 0.0f32;
            for b0 in (0..cols).step_by(block_size) {
                let b1 = (b0 + block_size).min(cols);
                for i in b0..b1 {
                    if i % group_size == 0 {
                        let g = i / group_size;
                        let end = (i + group_size).min(cols);
                        scale = group_scale(wr[i..end].iter().map(|&v| v as f32), qm);
                        scales[g] = scale;
                    }
                    let code = quantize_value(wr[i], scale, qm);
                    codes[i] = code;
                    let q = code as f32 * scale;
                    let e = (wr[i] - q as f64) / u[i * cols + i];
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
            }
            (codes, scales)
        })
        .collect();

    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * ng);
    for (c, s) in per_row {
        codes.extend(c);
        scales.extend(s);
    }
    Ok(grid_tensor(QuantMethod::Gptq, w, bits, group_size, codes, scales))
}

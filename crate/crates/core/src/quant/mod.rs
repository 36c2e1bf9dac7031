//! Quantizer backends, payload formats and bit-width accounting.
//!
//! Three formats share one tensor type:
//!
//! * `rtn4` / `gptq4`: signed integer codes on a symmetric per-group grid,
//!   packed two per byte, with one f32 scale per `(row, group)`.
//! * `bin`: a sign plane for every weight, a second (residual) sign plane for
//!   the salient columns, and per `(row, block)` scales
//!   `[α₁, α₂, β_lo, β_hi, t]`. Non-salient weights carry a split flag that
//!   selects `β_lo` or `β_hi`.
//!
//! Bits per weight follow the usual convention for weight-only PTQ: code
//! planes are counted, f32 side information (scales, column indices, split
//! flags) is not. [`QuantizedTensor::storage_bits_per_weight`] reports the
//! full payload for comparison.

mod billm;
mod grid;
mod hessian;
pub mod pack;
mod stack;

pub use billm::{billm_binarize, binarize_group, residual_binarize, salient_count, split_search, SplitResult};
pub use grid::{gptq_quantize, qmax, rtn_quantize};
pub use hessian::HessianAccumulator;
pub use stack::{quantize_stack, QuantizedStack, StackQuantizer};

use serde::{Deserialize, Serialize};

use crate::container::{Container, DType, QuantParams, QuantTag};
use crate::error::{LuqError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    Rtn,
    Gptq,
    Bin,
}

impl QuantMethod {
    pub fn tag(self) -> QuantTag {
        match self {
            QuantMethod::Rtn => QuantTag::Rtn4,
            QuantMethod::Gptq => QuantTag::Gptq4,
            QuantMethod::Bin => QuantTag::Bin,
        }
    }
}

/// How calibration inputs for layer `i` are produced during stack quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// Through the already-quantized layers `1..i`.
    #[default]
    Sequential,
    /// Through the full-precision stack.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub q_high: QuantMethod,
    pub high_bits: u8,
    pub q_low: QuantMethod,
    pub low_nominal_bits: f64,
    pub block_size: usize,
    pub group_size: usize,
    /// Fraction of the mean Hessian diagonal added before inversion.
    pub damp: f64,
    /// Salient column fraction of the binarizer; `None` derives it from
    /// `low_nominal_bits`.
    pub salient_fraction: Option<f64>,
    pub propagation: Propagation,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            q_high: QuantMethod::Gptq,
            high_bits: 4,
            q_low: QuantMethod::Bin,
            low_nominal_bits: 1.08,
            block_size: 128,
            group_size: 128,
            damp: 0.01,
            salient_fraction: None,
            propagation: Propagation::Sequential,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.group_size == 0 {
            return Err(LuqError::invalid("block_size and group_size must be >= 1"));
        }
        if !(2..=4).contains(&self.high_bits) {
            return Err(LuqError::invalid(format!("high_bits {} not in {{2, 3, 4}}", self.high_bits)));
        }
        if self.q_high == QuantMethod::Bin {
            return Err(LuqError::invalid("q_high must be a grid quantizer (rtn or gptq)"));
        }
        if !(self.damp.is_finite() && self.damp >= 0.0) {
            return Err(LuqError::invalid("damp must be finite and non-negative"));
        }
        if let Some(f) = self.salient_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(LuqError::invalid("salient_fraction must lie in [0, 1]"));
            }
        }
        if !(1.0..=2.0).contains(&self.low_nominal_bits) && self.q_low == QuantMethod::Bin {
            return Err(LuqError::invalid("binarizer nominal bits must lie in [1, 2]"));
        }
        Ok(())
    }

    pub fn salient_fraction(&self) -> f64 {
        self.salient_fraction.unwrap_or((self.low_nominal_bits - 1.0).clamp(0.0, 1.0))
    }

    pub fn nominal_bits(&self, method: QuantMethod) -> f64 {
        if method == self.q_low && method == QuantMethod::Bin {
            self.low_nominal_bits
        } else if method == QuantMethod::Bin {
            1.0 + self.salient_fraction()
        } else {
            self.high_bits as f64
        }
    }

    pub fn low_nominal(&self) -> f64 {
        match self.q_low {
            QuantMethod::Bin => self.low_nominal_bits,
            _ => self.high_bits as f64,
        }
    }

    pub fn high_nominal(&self) -> f64 {
        self.high_bits as f64
    }

    /// Quantize one `[out, in]` weight with `method`.
    pub fn quantize(&self, method: QuantMethod, w: &Matrix, h: &HessianAccumulator) -> Result<QuantizedTensor> {
        match method {
            QuantMethod::Rtn => rtn_quantize(w, self.high_bits, self.group_size),
            QuantMethod::Gptq => gptq_quantize(w, h, self.high_bits, self.block_size, self.group_size, self.damp),
            QuantMethod::Bin => billm_binarize(w, h, self.block_size, self.damp, self.salient_fraction()),
        }
    }

    pub fn params_for(&self, method: QuantMethod) -> QuantParams {
        match method {
            QuantMethod::Bin => QuantParams { bits: 1, group_size: self.block_size, block_size: self.block_size },
            _ => QuantParams { bits: self.high_bits, group_size: self.group_size, block_size: self.block_size },
        }
    }
}

/// Packed quantized weight of shape `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub method: QuantMethod,
    pub rows: usize,
    pub cols: usize,
    /// Grid bits (2..=4) for grid formats, 1 for `bin`.
    pub bits: u8,
    /// Scale group width (grid) or column block width (bin).
    pub group_size: usize,
    /// Packed nibbles (grid) or the sign plane (bin).
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub salient: Vec<u32>,
    /// Residual sign plane, `[rows, salient.len()]`.
    pub residual: Vec<u8>,
    /// Group flags for non-salient weights, `[rows, cols - salient.len()]`.
    pub split: Vec<u8>,
}

pub const BIN_SCALES_PER_BLOCK: usize = 5;

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    /// Realized bits per weight: code planes only.
    pub fn bits_per_weight(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        match self.method {
            QuantMethod::Rtn | QuantMethod::Gptq => self.bits as f64,
            QuantMethod::Bin => {
                let code_bits = self.numel() + self.rows * self.salient.len();
                code_bits as f64 / self.numel() as f64
            }
        }
    }

    /// Bits per weight counting every stored byte.
    pub fn storage_bits_per_weight(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        let bytes = self.codes.len()
            + self.scales.len() * 4
            + self.salient.len() * 4
            + self.residual.len()
            + self.split.len();
        8.0 * bytes as f64 / self.numel() as f64
    }

    pub fn dequantize(&self) -> Result<Matrix> {
        self.check_payload()?;
        let (rows, cols) = (self.rows, self.cols);
        let mut out = vec![0.0f32; rows * cols];
        match self.method {
            QuantMethod::Rtn | QuantMethod::Gptq => {
                let codes = pack::unpack_nibbles(&self.codes, rows * cols);
                let ng = self.n_groups();
                for r in 0..rows {
                    for c in 0..cols {
                        let s = self.scales[r * ng + c / self.group_size];
                        out[r * cols + c] = codes[r * cols + c] as f32 * s;
                    }
                }
            }
            QuantMethod::Bin => {
                let layout = BinLayout::new(self.cols, self.group_size, &self.salient)?;
                let signs = pack::unpack_bits(&self.codes, rows * cols);
                let resid = pack::unpack_bits(&self.residual, rows * layout.n_salient());
                let split = pack::unpack_bits(&self.split, rows * layout.n_plain());
                let nb = layout.n_blocks();
                for r in 0..rows {
                    for c in 0..cols {
                        let b = c / self.group_size;
                        let sc = &self.scales[(r * nb + b) * BIN_SCALES_PER_BLOCK..][..BIN_SCALES_PER_BLOCK];
                        let s1 = signs[r * cols + c];
                        out[r * cols + c] = match layout.slot(c) {
                            Slot::Salient(k) => bin_salient_value(sc[0], sc[1], s1, resid[r * layout.n_salient() + k]),
                            Slot::Plain(k) => bin_plain_value(sc[2], sc[3], s1, split[r * layout.n_plain() + k]),
                        };
                    }
                }
            }
        }
        Ok(Matrix { rows, cols, data: out })
    }

    /// Re-derive codes for `values` under this tensor's scales and layout.
    /// For any `q`, `q.repack(&q.dequantize()?)` reproduces `q` whenever the
    /// reconstruction levels of each group are distinct.
    pub fn repack(&self, values: &Matrix) -> Result<QuantizedTensor> {
        if values.rows != self.rows || values.cols != self.cols {
            return Err(LuqError::shape("repack shape differs from the quantized tensor"));
        }
        let (rows, cols) = (self.rows, self.cols);
        let mut q = self.clone();
        match self.method {
            QuantMethod::Rtn | QuantMethod::Gptq => {
                let qm = qmax(self.bits);
                let ng = self.n_groups();
                let codes: Vec<i8> = (0..rows * cols)
                    .map(|i| {
                        let (r, c) = (i / cols, i % cols);
                        grid::quantize_value(values.data[i] as f64, self.scales[r * ng + c / self.group_size], qm)
                    })
                    .collect();
                q.codes = pack::pack_nibbles(&codes);
            }
            QuantMethod::Bin => {
                let layout = BinLayout::new(cols, self.group_size, &self.salient)?;
                let nb = layout.n_blocks();
                let mut signs = vec![false; rows * cols];
                let mut resid = vec![false; rows * layout.n_salient()];
                let mut split = vec![false; rows * layout.n_plain()];
                for r in 0..rows {
                    for c in 0..cols {
                        let sc = &self.scales[(r * nb + c / self.group_size) * BIN_SCALES_PER_BLOCK..][..BIN_SCALES_PER_BLOCK];
                        let v = values.data[r * cols + c];
                        match layout.slot(c) {
                            Slot::Salient(k) => {
                                let mut best = (f32::INFINITY, true, true);
                                for (s1, s2) in [(true, true), (true, false), (false, true), (false, false)] {
                                    let e = (v - bin_salient_value(sc[0], sc[1], s1, s2)).abs();
                                    if e < best.0 {
                                        best = (e, s1, s2);
                                    }
                                }
                                signs[r * cols + c] = best.1;
                                resid[r * layout.n_salient() + k] = best.2;
                            }
                            Slot::Plain(k) => {
                                let hi = v.abs() >= sc[4];
                                signs[r * cols + c] = v.is_sign_positive();
                                split[r * layout.n_plain() + k] = hi;
                            }
                        }
                    }
                }
                q.codes = pack::pack_bits(&signs);
                q.residual = pack::pack_bits(&resid);
                q.split = pack::pack_bits(&split);
            }
        }
        Ok(q)
    }

    fn check_payload(&self) -> Result<()> {
        let bad = |what: &str| Err(LuqError::shape(format!("payload length mismatch: {what}")));
        if self.group_size == 0 {
            return bad("zero group size");
        }
        let n = self.numel();
        match self.method {
            QuantMethod::Rtn | QuantMethod::Gptq => {
                if self.codes.len() != DType::Packed4.payload_len(n) {
                    return bad("codes");
                }
                if self.scales.len() != self.rows * self.n_groups() {
                    return bad("scales");
                }
            }
            QuantMethod::Bin => {
                let ns = self.salient.len();
                if ns > self.cols {
                    return bad("salient list longer than the row");
                }
                if self.codes.len() != DType::PackedBin.payload_len(n)
                    || self.residual.len() != DType::PackedBin.payload_len(self.rows * ns)
                    || self.split.len() != DType::PackedBin.payload_len(self.rows * (self.cols - ns))
                {
                    return bad("sign planes");
                }
                if self.scales.len() != self.rows * self.n_groups() * BIN_SCALES_PER_BLOCK {
                    return bad("scales");
                }
            }
        }
        Ok(())
    }

    /// Store under `{base}.codes`, `{base}.scales` and, for `bin`,
    /// `{base}.salient`, `{base}.resid`, `{base}.split`.
    pub fn write_records(&self, c: &mut Container, base: &str) -> Result<()> {
        let shape = [self.rows, self.cols];
        match self.method {
            QuantMethod::Rtn | QuantMethod::Gptq => {
                c.push(&format!("{base}.codes"), DType::Packed4, &shape, self.codes.clone())?;
                c.push_f32(&format!("{base}.scales"), &[self.rows, self.n_groups()], &self.scales)?;
            }
            QuantMethod::Bin => {
                let ns = self.salient.len();
                c.push(&format!("{base}.codes"), DType::PackedBin, &shape, self.codes.clone())?;
                c.push(&format!("{base}.resid"), DType::PackedBin, &[self.rows, ns], self.residual.clone())?;
                c.push(&format!("{base}.split"), DType::PackedBin, &[self.rows, self.cols - ns], self.split.clone())?;
                c.push_u32(&format!("{base}.salient"), &[ns], &self.salient)?;
                c.push_f32(
                    &format!("{base}.scales"),
                    &[self.rows, self.n_groups(), BIN_SCALES_PER_BLOCK],
                    &self.scales,
                )?;
            }
        }
        Ok(())
    }

    pub fn read_records(c: &Container, base: &str, tag: QuantTag, params: QuantParams) -> Result<Self> {
        let method = match tag {
            QuantTag::Rtn4 => QuantMethod::Rtn,
            QuantTag::Gptq4 => QuantMethod::Gptq,
            QuantTag::Bin => QuantMethod::Bin,
            QuantTag::Fp32 => return Err(LuqError::Manifest(format!("`{base}` is not quantized"))),
        };
        let dims2 = |shape: &[usize], name: &str| -> Result<(usize, usize)> {
            match shape {
                [r, c] => Ok((*r, *c)),
                _ => Err(LuqError::Manifest(format!("`{name}` must be 2-D"))),
            }
        };
        let q = match method {
            QuantMethod::Rtn | QuantMethod::Gptq => {
                let (shape, codes) = c.packed(&format!("{base}.codes"), DType::Packed4)?;
                let (rows, cols) = dims2(&shape, base)?;
                let (_, scales) = c.f32s(&format!("{base}.scales"))?;
                QuantizedTensor {
                    method,
                    rows,
                    cols,
                    bits: params.bits,
                    group_size: params.group_size,
                    codes,
                    scales,
                    salient: Vec::new(),
                    residual: Vec::new(),
                    split: Vec::new(),
                }
            }
            QuantMethod::Bin => {
                let (shape, codes) = c.packed(&format!("{base}.codes"), DType::PackedBin)?;
                let (rows, cols) = dims2(&shape, base)?;
                let (_, residual) = c.packed(&format!("{base}.resid"), DType::PackedBin)?;
                let (_, split) = c.packed(&format!("{base}.split"), DType::PackedBin)?;
                let (_, salient) = c.u32s(&format!("{base}.salient"))?;
                let (_, scales) = c.f32s(&format!("{base}.scales"))?;
                QuantizedTensor {
                    method,
                    rows,
                    cols,
                    bits: 1,
                    group_size: params.block_size,
                    codes,
                    scales,
                    salient,
                    residual,
                    split,
                }
            }
        };
        q.check_payload()?;
        if q.method == QuantMethod::Bin {
            BinLayout::new(q.cols, q.group_size, &q.salient)?;
        }
        Ok(q)
    }
}

#[inline]
pub(crate) fn sign_of(s: bool) -> f32 {
    if s {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub(crate) fn bin_salient_value(a1: f32, a2: f32, s1: bool, s2: bool) -> f32 {
    a1 * sign_of(s1) + a2 * sign_of(s2)
}

#[inline]
pub(crate) fn bin_plain_value(lo: f32, hi: f32, s: bool, is_hi: bool) -> f32 {
    sign_of(s) * if is_hi { hi } else { lo }
}

pub(crate) enum Slot {
    Salient(usize),
    Plain(usize),
}

/// Column bookkeeping of the `bin` format: where each column's residual or
/// split flag lives.
pub(crate) struct BinLayout {
    slots: Vec<Slot>,
    n_salient: usize,
    block: usize,
    cols: usize,
}

impl BinLayout {
    pub(crate) fn new(cols: usize, block: usize, salient: &[u32]) -> Result<Self> {
        if block == 0 {
            return Err(LuqError::shape("zero block size"));
        }
        let mut is_sal = vec![false; cols];
        for w in salient.windows(2) {
            if w[0] >= w[1] {
                return Err(LuqError::shape("salient indices must be strictly ascending"));
            }
        }
        for &s in salient {
            let s = s as usize;
            if s >= cols {
                return Err(LuqError::shape(format!("salient column {s} out of range")));
            }
            is_sal[s] = true;
        }
        let (mut ks, mut kp) = (0, 0);
        let slots = is_sal
            .iter()
            .map(|&s| {
                if s {
                    ks += 1;
                    Slot::Salient(ks - 1)
                } else {
                    kp += 1;
                    Slot::Plain(kp - 1)
                }
            })
            .collect();
        Ok(Self { slots, n_salient: salient.len(), block, cols })
    }

    fn slot(&self, c: usize) -> &Slot {
        &self.slots[c]
    }

    fn n_salient(&self) -> usize {
        self.n_salient
    }

    fn n_plain(&self) -> usize {
        self.cols - self.n_salient
    }

    fn n_blocks(&self) -> usize {
        self.cols.div_ceil(self.block)
    }
}

/// Unweighted mean of per-layer realized bits over the backbone layers.
pub fn avg_bitwidth(per_layer_bits: &[f64]) -> Result<f64> {
    if per_layer_bits.is_empty() {
        return Err(LuqError::Empty("layer list"));
    }
    Ok(per_layer_bits.iter().sum::<f64>() / per_layer_bits.len() as f64)
}

/// Parameter-weighted mean of per-layer bits.
pub fn avg_bitwidth_weighted(per_layer_bits: &[f64], params: &[usize]) -> Result<f64> {
    if per_layer_bits.is_empty() || per_layer_bits.len() != params.len() {
        return Err(LuqError::invalid("bits and parameter counts must be non-empty and equal length"));
    }
    let total: usize = params.iter().sum();
    if total == 0 {
        return Err(LuqError::invalid("zero parameters"));
    }
    Ok(per_layer_bits.iter().zip(params).map(|(b, &p)| b * p as f64).sum::<f64>() / total as f64)
}

/// Nominal per-layer bits for `k` layers in the low tier out of `num_layers`.
pub fn nominal_layer_bits(k: usize, num_layers: usize, low: f64, high: f64) -> Vec<f64> {
    (0..num_layers).map(|i| if i < k { low } else { high }).collect()
}

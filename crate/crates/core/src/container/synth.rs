//! Seeded layer stacks with planted per-layer complexity.
//!
//! A layer of rank `r < d` is token-local: its attention output projection is
//! zero and its MLP is `down · tanh(up · x)` with rank-`r` Gaussian factor
//! products, so its outputs take at most as many distinct values as its
//! inputs do. A full-rank layer (`r = d`) also mixes context through a dense
//! attention output projection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Container, ModelConfig, QuantTag};
use crate::error::{LuqError, Result};
use crate::net::{Layer, LayerStack, Linear};
use crate::tensor::{rng_for, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Rank of each layer's MLP factors, `1 <= r <= hidden_dim`.
    pub ranks: Vec<usize>,
    pub hidden_dim: usize,
    pub seed: u64,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub positions: bool,
    /// Pre-activation gain of the MLP up projection.
    pub up_gain: f32,
    pub down_gain: f32,
}

impl SynthSpec {
    pub fn new(ranks: Vec<usize>, hidden_dim: usize, seed: u64) -> Self {
        Self {
            ranks,
            hidden_dim,
            seed,
            heads: 4,
            ff_dim: 4 * hidden_dim,
            vocab_size: 32,
            positions: false,
            up_gain: 0.25,
            down_gain: 0.5,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.ranks.len(),
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            vocab_size: self.vocab_size,
            positions: self.positions,
        }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
    Matrix { rows, cols, data }
}

/// `scale · A·B` for `A: [rows, r]`, `B: [r, cols]` standard normal.
fn low_rank(rng: &mut impl Rng, rows: usize, cols: usize, r: usize, scale: f32) -> Matrix {
    let a = gaussian(rng, rows, r, 1.0);
    let b = gaussian(rng, r, cols, 1.0);
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for k in 0..r {
            let aik = a.get(i, k) * scale;
            let brow = b.row(k);
            for (o, bv) in m.row_mut(i).iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    m
}

pub fn synth_layer_stack(spec: &SynthSpec) -> Result<LayerStack> {
    let cfg = spec.config();
    cfg.validate()?;
    let d = spec.hidden_dim;
    for (i, &r) in spec.ranks.iter().enumerate() {
        if r == 0 || r > d {
            return Err(LuqError::invalid(format!("rank {r} of layer {} outside 1..={d}", i + 1)));
        }
    }
    let mut rng = rng_for(spec.seed, 0);
    let embed = gaussian(&mut rng, spec.vocab_size, d, 1.0);
    let head = gaussian(&mut rng, spec.vocab_size, d, 1.0 / (d as f32).sqrt());
    let ff = spec.ff_dim;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let layers = spec
        .ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = rng_for(spec.seed, 1 + i as u64);
            let q = gaussian(&mut rng, d, d, inv_sqrt_d);
            let k = gaussian(&mut rng, d, d, inv_sqrt_d);
            let v = gaussian(&mut rng, d, d, inv_sqrt_d);
            let o = if r == d { gaussian(&mut rng, d, d, inv_sqrt_d) } else { Matrix::zeros(d, d) };
            let up = low_rank(&mut rng, ff, d, r, spec.up_gain * inv_sqrt_d);
            let down = low_rank(&mut rng, d, ff, r, spec.down_gain / (ff as f32).sqrt());
            Layer {
                tag: QuantTag::Fp32,
                qparams: None,
                linears: [q, k, v, o, up, down].into_iter().map(Linear::dense).collect(),
            }
        })
        .collect();
    Ok(LayerStack { config: cfg, embed, head, layers })
}

/// Serialized planted-complexity stack (`kind = "model"`).
pub fn synth_stack(spec: &SynthSpec) -> Result<Container> {
    synth_layer_stack(spec)?.to_container()
}

//! Cluster-based activation entropy and rank-stability selection of K.

mod kendall;
mod kmeans;
mod kneedle;

pub use kendall::{discordant_pairs, kendall_distance};
pub use kmeans::{kmeans_fit, ClusterModel, MAX_ITERS, TOLERANCE};
pub use kneedle::{kneedle_elbow, Knee};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LuqError, Result};
use crate::tensor::{Activations, Matrix};

pub const DEFAULT_K: usize = 100;
pub const TIE_BREAK: &str = "lower-layer-first";

pub fn default_k_grid() -> Vec<usize> {
    (1..=20).map(|i| 10 * i).collect()
}

/// Flatten `[B, N, d]` into `[B·N, d]` rows.
pub fn pool_tokens(acts: &Activations) -> Matrix {
    Matrix { rows: acts.tokens(), cols: acts.dim, data: acts.data.clone() }
}

/// `P(k) = count(k) / M`.
pub fn empirical_distribution(assignments: &[u32], k: usize) -> Result<Vec<f64>> {
    if assignments.is_empty() {
        return Err(LuqError::Empty("assignment list"));
    }
    let mut counts = vec![0u64; k];
    for &a in assignments {
        let a = a as usize;
        if a >= k {
            return Err(LuqError::invalid(format!("cluster id {a} outside 0..{k}")));
        }
        counts[a] += 1;
    }
    let m = assignments.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / m).collect())
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(LuqError::InvalidDistribution("negative or non-finite mass".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(LuqError::InvalidDistribution(format!("mass sums to {total}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// Stable ascending order of `h`; equal values keep the lower index first.
pub fn entropy_order(h: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
    idx
}

/// Entropy of one pooled token matrix under a `k`-cluster fit.
pub fn token_entropy(tokens: &Matrix, k: usize, seed: u64) -> Result<f64> {
    let model = kmeans_fit(tokens, k, seed)?;
    let p = empirical_distribution(&model.assign(tokens)?, k)?;
    shannon_entropy(&p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub k: usize,
    /// `H_i` in nats, network order.
    pub entropies: Vec<f64>,
    /// 0-based layer indices by ascending entropy.
    pub order: Vec<usize>,
    pub seed: u64,
    pub tie_break: String,
}

impl EntropyProfile {
    pub fn from_entropies(entropies: Vec<f64>, k: usize, seed: u64) -> Self {
        let order = entropy_order(&entropies);
        Self { k, entropies, order, seed, tie_break: TIE_BREAK.to_string() }
    }

    pub fn num_layers(&self) -> usize {
        self.entropies.len()
    }

    /// `{"K", "H", "pi", "seed"}` with 1-based layer numbers in `pi`.
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "K": self.k,
            "H": self.entropies,
            "pi": self.order.iter().map(|i| i + 1).collect::<Vec<_>>(),
            "seed": self.seed,
        })
    }

    pub fn from_report(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Report {
            #[serde(rename = "K")]
            k: usize,
            #[serde(rename = "H")]
            h: Vec<f64>,
            seed: u64,
        }
        let r: Report = serde_json::from_value(v.clone())?;
        if r.h.is_empty() {
            return Err(LuqError::Empty("entropy report"));
        }
        Ok(Self::from_entropies(r.h, r.k, r.seed))
    }
}

/// Per-layer entropy of block outputs. Every layer gets its own k-means fit,
/// seeded from `seed` alone, so identical activations give identical
/// entropies regardless of depth.
pub fn layer_entropy_profile(acts: &[Activations], k: usize, seed: u64) -> Result<EntropyProfile> {
    if acts.is_empty() {
        return Err(LuqError::Empty("activation set"));
    }
    let entropies = acts
        .par_iter()
        .map(|a| token_entropy(&pool_tokens(a), k, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyProfile::from_entropies(entropies, k, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    pub grid: Vec<usize>,
    /// Distance between the orderings at `grid[j]` and `grid[j + 1]`.
    pub distances: Vec<f64>,
    pub selected_k: usize,
    pub no_knee: bool,
    pub sensitivity: f64,
}

fn check_grid(grid: &[usize], pooled: usize) -> Result<()> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LuqError::invalid("K grid must be strictly ascending"));
    }
    if let Some(&k) = grid.iter().find(|&&k| k == 0 || k > pooled) {
        return Err(LuqError::invalid(format!("K = {k} outside 1..={pooled}")));
    }
    Ok(())
}

/// Kendall distances between layer orderings at consecutive grid values.
pub fn stability_distances(acts: &[Activations], grid: &[usize], seed: u64) -> Result<Vec<f64>> {
    let pooled = acts.first().map(|a| a.tokens()).ok_or(LuqError::Empty("activation set"))?;
    check_grid(grid, pooled)?;
    if grid.len() < 2 {
        return Ok(Vec::new());
    }
    let orders = grid
        .iter()
        .map(|&k| layer_entropy_profile(acts, k, seed).map(|p| p.order))
        .collect::<Result<Vec<_>>>()?;
    if orders[0].len() < 2 {
        return Ok(vec![0.0; grid.len() - 1]);
    }
    orders.windows(2).map(|w| kendall_distance(&w[0], &w[1])).collect()
}

/// Stability curve over `grid` with K picked at its knee (x = `K_{j+1}`).
pub fn rank_stability_curve(acts: &[Activations], grid: &[usize], seed: u64, sensitivity: f64) -> Result<StabilityCurve> {
    let distances = stability_distances(acts, grid, seed)?;
    curve_from_distances(grid, distances, sensitivity)
}

pub fn curve_from_distances(grid: &[usize], distances: Vec<f64>, sensitivity: f64) -> Result<StabilityCurve> {
    if distances.len() < 3 || distances.len() + 1 != grid.len() {
        return Err(LuqError::GridTooSmall(format!(
            "{} grid values give {} distances; knee selection needs at least 3",
            grid.len(),
            distances.len()
        )));
    }
    let xs: Vec<f64> = grid[1..].iter().map(|&k| k as f64).collect();
    let knee = kneedle_elbow(&xs, &distances, sensitivity)?;
    Ok(StabilityCurve {
        grid: grid.to_vec(),
        distances,
        selected_k: grid[1 + knee.index],
        no_knee: knee.no_knee,
        sensitivity,
    })
}

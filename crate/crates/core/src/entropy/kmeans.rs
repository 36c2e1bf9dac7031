use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LuqError, Result};
use crate::tensor::{rng_for, sq_dist, Matrix};

pub const MAX_ITERS: usize = 100;
pub const TOLERANCE: f64 = 1e-4;
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `[k, dim]` row-major.
    pub centroids: Vec<f32>,
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia measured at the assignment step of every iteration, then
    /// after the final update.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid of every row; ties go to the lowest index.
    pub fn assign(&self, tokens: &Matrix) -> Result<Vec<u32>> {
        if tokens.cols != self.dim {
            return Err(LuqError::shape(format!("token width {} for centroids of width {}", tokens.cols, self.dim)));
        }
        Ok(nearest_all(tokens, &self.centroids, self.k).into_iter().map(|(j, _)| j as u32).collect())
    }
}

fn nearest(x: &[f32], centroids: &[f32], k: usize) -> (usize, f32) {
    let d = x.len();
    let mut best = (0, f32::INFINITY);
    for j in 0..k {
        let dist = sq_dist(x, &centroids[j * d..(j + 1) * d]);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn nearest_all(tokens: &Matrix, centroids: &[f32], k: usize) -> Vec<(usize, f32)> {
    let d = tokens.cols;
    tokens
        .data
        .par_chunks(CHUNK * d.max(1))
        .flat_map_iter(|chunk| chunk.chunks_exact(d).map(|x| nearest(x, centroids, k)).collect::<Vec<_>>())
        .collect()
}

/// k-means++ seeding: first centre uniform, then D²-weighted draws. When all
/// remaining mass is zero (duplicate points) the draw is uniform.
fn seed_centroids(tokens: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let (m, d) = (tokens.rows, tokens.cols);
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..m);
    centroids.extend_from_slice(tokens.row(first));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(tokens.row(i), tokens.row(first)) as f64).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            while dist[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        let c = tokens.row(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(tokens.row(i), &c) as f64);
        }
        centroids.extend(c);
    }
    centroids
}

/// k-means++ seeded Lloyd iterations on the rows of `tokens`.
///
/// Stops after [`MAX_ITERS`] updates or once the centroid shift, relative to
/// the centroid norm, drops below [`TOLERANCE`]. A cluster left empty is
/// moved onto the point currently farthest from its centroid.
pub fn kmeans_fit(tokens: &Matrix, k: usize, seed: u64) -> Result<ClusterModel> {
    let (m, d) = (tokens.rows, tokens.cols);
    if k == 0 {
        return Err(LuqError::invalid("K must be >= 1"));
    }
    if m < k {
        return Err(LuqError::invalid(format!("{m} tokens for K = {k}")));
    }
    let mut rng = rng_for(seed, 0x6b6d);
    let mut centroids = seed_centroids(tokens, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        let assigned = nearest_all(tokens, &centroids, k);
        history.push(assigned.iter().map(|&(_, e)| e as f64).sum());

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(j, _)) in assigned.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums[j * d..(j + 1) * d].iter_mut().zip(tokens.row(i)) {
                *s += x as f64;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..d {
                    next[j * d + c] = (sums[j * d + c] / counts[j] as f64) as f32;
                }
            }
        }
        let mut far: Vec<f32> = assigned.iter().map(|&(_, e)| e).collect();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let (idx, dist) = far
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            if dist > 0.0 {
                next[j * d..(j + 1) * d].copy_from_slice(tokens.row(idx));
                far[idx] = 0.0;
            }
        }
        let shift: f64 = next.iter().zip(&centroids).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = centroids.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        centroids = next;
        iterations += 1;
        if shift <= TOLERANCE * norm.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let inertia: f64 = nearest_all(tokens, &centroids, k).iter().map(|&(_, e)| e as f64).sum();
    history.push(inertia);
    Ok(ClusterModel { k, dim: d, centroids, iterations, inertia, inertia_history: history, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_cluster_is_the_mean() {
        let t = Matrix::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 2.0, 4.0, 0.0, 4.0]).unwrap();
        let m = kmeans_fit(&t, 1, 3).unwrap();
        assert_eq!(m.centroid(0), &[1.0, 2.0]);
    }

    #[test]
    fn two_blobs() {
        let mut rng = rng_for(1, 2);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let mut data = Vec::new();
        for sign in [1.0f32, -1.0] {
            for _ in 0..100 {
                data.push(10.0 * sign + noise.sample(&mut rng));
                for _ in 1..3 {
                    data.push(noise.sample(&mut rng));
                }
            }
        }
        let t = Matrix::from_vec(200, 3, data).unwrap();
        let blob_mean = |lo: usize| -> Vec<f32> {
            (0..3).map(|c| (lo..lo + 100).map(|i| t.get(i, c)).sum::<f32>() / 100.0).collect()
        };
        let (a, b) = (blob_mean(0), blob_mean(100));
        let m = kmeans_fit(&t, 2, 5).unwrap();
        for want in [a, b] {
            let close = (0..2).any(|j| m.centroid(j).iter().zip(&want).all(|(x, y)| (x - y).abs() < 0.1));
            assert!(close);
        }
    }

    #[test]
    fn one_point_per_cluster() {
        let t = Matrix::from_vec(5, 1, vec![0.0, 1.0, 3.0, 7.0, 15.0]).unwrap();
        assert_eq!(kmeans_fit(&t, 5, 0).unwrap().inertia, 0.0);
    }

    #[test]
    fn too_few_tokens() {
        assert!(kmeans_fit(&Matrix::zeros(2, 3), 3, 0).is_err());
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let model = ClusterModel {
            k: 5,
            dim: 1,
            centroids: vec![9.0, -1.0, 5.0, 4.0, 1.0],
            iterations: 0,
            inertia: 0.0,
            inertia_history: vec![],
            seed: 0,
        };
        let t = Matrix::from_vec(2, 1, vec![0.0, 4.0]).unwrap();
        assert_eq!(model.assign(&t).unwrap(), vec![1, 3]);
    }
}

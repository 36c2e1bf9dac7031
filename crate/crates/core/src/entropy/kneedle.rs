use serde::{Deserialize, Serialize};

use crate::error::{LuqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub x: f64,
    pub index: usize,
    /// No knee was detected; `x` is the last grid value.
    pub no_knee: bool,
}

/// Knee of a decreasing convex curve.
///
/// Both axes are min-max normalized and the difference curve
/// `D = 1 - x_n - y_n` is formed. Its maximum is a knee when `D` later drops
/// below `D_max - S · mean(Δx_n)`.
pub fn kneedle_elbow(xs: &[f64], ys: &[f64], sensitivity: f64) -> Result<Knee> {
    let n = xs.len();
    if n != ys.len() {
        return Err(LuqError::invalid(format!("{} x values for {} y values", n, ys.len())));
    }
    if n < 3 {
        return Err(LuqError::GridTooSmall(format!("knee detection needs at least 3 points, got {n}")));
    }
    if xs.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(LuqError::invalid("x grid must be strictly ascending"));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(LuqError::invalid("non-finite curve value"));
    }
    let no_knee = Knee { x: xs[n - 1], index: n - 1, no_knee: true };
    let (y_min, y_max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if y_max == y_min {
        return Ok(no_knee);
    }
    let (x0, xr) = (xs[0], xs[n - 1] - xs[0]);
    let xn: Vec<f64> = xs.iter().map(|x| (x - x0) / xr).collect();
    let diff: Vec<f64> = xn
        .iter()
        .zip(ys)
        .map(|(x, y)| 1.0 - x - (y - y_min) / (y_max - y_min))
        .collect();
    let mut best = 0;
    for i in 1..n {
        if diff[i] > diff[best] {
            best = i;
        }
    }
    let d_max = diff[best];
    if d_max <= 1e-12 {
        return Ok(no_knee);
    }
    let mean_step = (xn[n - 1] - xn[0]) / (n - 1) as f64;
    let threshold = d_max - sensitivity * mean_step;
    for &d in &diff[best + 1..] {
        if d > d_max {
            break;
        }
        if d < threshold {
            return Ok(Knee { x: xs[best], index: best, no_knee: false });
        }
    }
    Ok(no_knee)
}

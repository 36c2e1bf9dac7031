use crate::error::{LuqError, Result};

fn positions(p: &[usize]) -> Result<Vec<usize>> {
    let mut pos = vec![usize::MAX; p.len()];
    for (i, &x) in p.iter().enumerate() {
        if x >= p.len() || pos[x] != usize::MAX {
            return Err(LuqError::invalid(format!("{p:?} is not a permutation of 0..{}", p.len())));
        }
        pos[x] = i;
    }
    Ok(pos)
}

/// Number of element pairs ordered differently by the two permutations.
pub fn discordant_pairs(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(LuqError::invalid(format!("rankings of length {} and {}", a.len(), b.len())));
    }
    let (pa, pb) = (positions(a)?, positions(b)?);
    let n = a.len();
    let mut count = 0;
    for x in 0..n {
        for y in x + 1..n {
            let da = pa[x] as isize - pa[y] as isize;
            let db = pb[x] as isize - pb[y] as isize;
            if (da < 0) != (db < 0) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Normalized Kendall tau distance: discordant pairs over `n(n-1)/2`.
pub fn kendall_distance(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    if n < 2 || b.len() < 2 {
        if a.len() != b.len() {
            return Err(LuqError::invalid(format!("rankings of length {} and {}", a.len(), b.len())));
        }
        return Err(LuqError::invalid("Kendall distance needs at least two items"));
    }
    let d = discordant_pairs(a, b)?;
    Ok(d as f64 / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_reversed() {
        assert_eq!(kendall_distance(&[2, 0, 1, 3], &[2, 0, 1, 3]).unwrap(), 0.0);
        assert_eq!(kendall_distance(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn one_adjacent_swap() {
        assert_eq!(kendall_distance(&[0, 1, 2, 3], &[0, 2, 1, 3]).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(kendall_distance(&[0, 1], &[0, 1, 2]).is_err());
        assert!(kendall_distance(&[0, 0, 1], &[0, 1, 2]).is_err());
        assert!(kendall_distance(&[0], &[0]).is_err());
    }
}

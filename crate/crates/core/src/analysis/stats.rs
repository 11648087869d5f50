use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::DataError;

/// Mean and standard error (sample SD over √n; zero for a single value).
pub fn mean_se(values: &[f64]) -> Result<(f64, f64), DataError> {
    if values.is_empty() {
        return Err(DataError::Invalid("mean of an empty sample".into()));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt() / n.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample.
    pub u: f64,
    pub p: f64,
    pub method: PMethod,
}

/// Largest combined size for which the exact null distribution is enumerated.
pub const EXACT_MAX_TOTAL: usize = 12;

/// Midranks (1-based) of the pooled sample, plus the tie group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn u_statistics(a: &[f64], b: &[f64]) -> (f64, f64, Vec<usize>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let n1 = a.len() as f64;
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let u2 = n1 * b.len() as f64 - u1;
    (u1, u2, ties)
}

/// Number of arrangements of m and n items giving each U value.
fn u_distribution(m: usize, n: usize) -> Vec<f64> {
    // f[i][j] is the count vector for sizes (i, j).
    let max = m * n;
    let mut f = vec![vec![Vec::<f64>::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            let mut v = vec![0.0; i * j + 1];
            if i == 0 || j == 0 {
                v[0] = 1.0;
            } else {
                // Largest item from the first sample adds j to U, else nothing.
                for (u, c) in f[i - 1][j].iter().enumerate() {
                    v[u + j] += c;
                }
                for (u, c) in f[i][j - 1].iter().enumerate() {
                    v[u] += c;
                }
            }
            f[i][j] = v;
        }
    }
    let out = f[m][n].clone();
    debug_assert_eq!(out.len(), max + 1);
    out
}

/// Two-sided exact p for tie-free samples: 2·P(U ≤ min(U1, U2)), capped at 1.
pub fn mann_whitney_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let (u1, u2, _) = u_statistics(a, b);
    let dist = u_distribution(a.len(), b.len());
    let total: f64 = dist.iter().sum();
    let umin = u1.min(u2).round() as usize;
    let tail: f64 = dist[..=umin].iter().sum();
    (2.0 * tail / total).min(1.0)
}

/// Normal approximation with tie and continuity correction.
pub fn mann_whitney_normal_p(a: &[f64], b: &[f64]) -> f64 {
    let (u1, u2, ties) = u_statistics(a, b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let mu = n1 * n2 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = (u1.max(u2) - mu - 0.5) / var.sqrt();
    let sf = 1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(z);
    (2.0 * sf).min(1.0)
}

/// Two-sided Mann-Whitney U test. Exact when the pooled sample has at most
/// [`EXACT_MAX_TOTAL`] values and no ties, normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, DataError> {
    if a.is_empty() || b.is_empty() {
        return Err(DataError::Invalid("Mann-Whitney U needs two nonempty samples".into()));
    }
    let (u1, _, ties) = u_statistics(a, b);
    let tie_free = ties.iter().all(|&t| t == 1);
    if tie_free && a.len() + b.len() <= EXACT_MAX_TOTAL {
        Ok(MannWhitney {
            u: u1,
            p: mann_whitney_exact_p(a, b),
            method: PMethod::Exact,
        })
    } else {
        Ok(MannWhitney {
            u: u1,
            p: mann_whitney_normal_p(a, b),
            method: PMethod::Normal,
        })
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub total: f64,
    /// `total / |Y|`, where Y indexes the columns (references).
    pub normalized: f64,
    /// (candidate row, reference column), sorted by row.
    pub pairs: Vec<(usize, usize)>,
}

/// Maximum-weight one-to-one assignment between rows and columns. Rectangular
/// inputs are padded with zero-score dummies.
pub fn hungarian_assign(scores: &[Vec<f64>]) -> AssignmentResult {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return AssignmentResult {
            total: 0.0,
            normalized: 0.0,
            pairs: Vec::new(),
        };
    }
    assert!(scores.iter().all(|r| r.len() == cols), "ragged score matrix");
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -scores[i][j]
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials; 1-based with column 0 as sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total: f64 = pairs.iter().map(|&(i, j)| scores[i][j]).sum();
    AssignmentResult {
        total,
        normalized: total / cols as f64,
        pairs,
    }
}

/// Exhaustive optimum over all injective row→column (or column→row) maps.
pub fn brute_force_optimum(scores: &[Vec<f64>]) -> f64 {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    fn go(scores: &[Vec<f64>], i: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let (rows, cols) = if transpose {
            (scores[0].len(), scores.len())
        } else {
            (scores.len(), scores[0].len())
        };
        if i == rows {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..cols {
            if used[j] {
                continue;
            }
            used[j] = true;
            let s = if transpose { scores[j][i] } else { scores[i][j] };
            best = best.max(s + go(scores, i + 1, used, transpose));
            used[j] = false;
        }
        best
    }
    if rows <= cols {
        go(scores, 0, &mut vec![false; cols], false)
    } else {
        go(scores, 0, &mut vec![false; rows], true)
    }
}

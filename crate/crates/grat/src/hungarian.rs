//! Minimum-cost linear assignment (Hungarian / shortest augmenting path).
//!
//! `hungarian_match` assigns min(m, n) row→column pairs of an m×n cost
//! matrix with the smallest possible total cost. Among equally cheap
//! assignments it returns the lexicographically smallest row→column
//! vector, where an unmatched row sorts after any matched column — so
//! e.g. an all-zeros square matrix yields the identity. Rectangular
//! matrices are handled by padding to square with zero-cost dummies,
//! which leaves exactly min(m, n) real pairs in any optimum.
//!
//! The core solver runs in O(s³) for s = max(m, n); the tie-break fixes
//! one row at a time and re-solves the remainder, which is O(m·n·s³) —
//! plenty for the desk-scale matrices this crate matches (n ≤ 8).

use crate::error::{Error, Result};

/// Tolerance for "these two totals are equally optimal" during
/// tie-breaking. Scaled by the magnitude of the optimum so integer and
/// unit-scale float costs both resolve ties exactly.
fn tie_eps(base: f64) -> f64 {
    1e-9 * (1.0 + base.abs())
}

/// The result of an assignment: `row_to_col[i]` is the column matched to
/// row i, or `None` when row i is left out (only possible when m > n).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
}

impl Assignment {
    /// Total cost of the matched pairs under `cost` (row-major m×n).
    pub fn total(&self, cost: &[f64], n: usize) -> f64 {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost[i * n + j]))
            .sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
    }
}

/// Optimal total for the sub-matrix formed by `rows` × `cols`, matching
/// min(|rows|, |cols|) pairs. Pads to square with zero-cost dummies.
fn optimal_total(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let (r, c) = (rows.len(), cols.len());
    if r == 0 || c == 0 {
        return 0.0;
    }
    let s = r.max(c);
    let mut m = vec![0.0; s * s];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            m[a * s + b] = cost[i * n + j];
        }
    }
    let row_to_col = solve_square(&m, s);
    let mut total = 0.0;
    for (a, &b) in row_to_col.iter().enumerate() {
        if a < r && b < c {
            total += m[a * s + b];
        }
    }
    total
}

/// Classic O(s³) assignment on a square matrix via potentials and
/// shortest augmenting paths. Returns row→column (all rows matched).
fn solve_square(c: &[f64], s: usize) -> Vec<usize> {
    // 1-based arrays with column 0 as the sentinel root of each path.
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut p = vec![0usize; s + 1]; // p[j] = row currently matched to column j
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=s {
                if !used[j] {
                    let cur = c[(i0 - 1) * s + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=s {
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
        // augment along the recorded path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; s];
    for j in 1..=s {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Minimum-cost assignment of an m×n row-major cost matrix, tie-broken
/// to the lexicographically smallest row→column vector (unmatched rows
/// sort last). All costs must be finite.
pub fn hungarian_match(cost: &[f64], m: usize, n: usize) -> Result<Assignment> {
    if cost.len() != m * n {
        return Err(Error::BadShape {
            op: "hungarian_match",
            shape: vec![m, n],
            reason: "cost entry count does not match m*n",
        });
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    let need = m.min(n);
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let base = optimal_total(cost, n, &all_rows, &all_cols);
    let eps = tie_eps(base);

    // Fix rows in order, always taking the smallest column (or None as a
    // last resort) that keeps the overall optimum attainable.
    let mut result = vec![None; m];
    let mut avail: Vec<usize> = all_cols;
    let mut acc = 0.0;
    let mut matched = 0usize;
    for i in 0..m {
        let rest: Vec<usize> = (i + 1..m).collect();
        let mut taken = None;
        for (slot, &j) in avail.iter().enumerate() {
            let others: Vec<usize> =
                avail.iter().copied().filter(|&x| x != j).collect();
            let t = acc + cost[i * n + j] + optimal_total(cost, n, &rest, &others);
            if t <= base + eps {
                taken = Some((slot, j));
                break;
            }
        }
        match taken {
            Some((slot, j)) => {
                result[i] = Some(j);
                acc += cost[i * n + j];
                avail.remove(slot);
                matched += 1;
            }
            None => {
                // Leaving row i unmatched must still allow `need` pairs
                // overall and keep the optimum; by exhaustion it does.
                debug_assert!(rest.len() >= need - matched);
                debug_assert!(
                    (acc + optimal_total(cost, n, &rest, &avail) - base).abs() <= eps
                );
            }
        }
    }
    debug_assert_eq!(matched, need);
    Ok(Assignment { row_to_col: result })
}

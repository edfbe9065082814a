//! Exact maximization linear sum assignment.
//!
//! [`solve_lap`] runs the Hungarian algorithm on `max(C) − C` in `f64`, then
//! walks the tight-edge graph of the optimal duals to pick the
//! lexicographically smallest optimal map. [`brute_force_lap`] is the
//! exhaustive oracle with the same tie-breaking rule.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

/// Largest size accepted by [`brute_force_lap`].
pub const BRUTE_FORCE_MAX: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("assignment needs a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("assignment matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("brute force is limited to d <= {max}, got {d}")]
    TooLarge { d: usize, max: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

/// A bijection on `0..d`, stored as `map[i] = π(i)`.
///
/// Applied to a vector it gathers: `apply(x)[i] = x[π(i)]`, which is the
/// product `P x` for the matrix with `P[i][π(i)] = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self, AssignmentError> {
        let mut seen = vec![false; map.len()];
        for (i, &m) in map.iter().enumerate() {
            if m >= map.len() {
                return Err(AssignmentError::InvalidPermutation(format!(
                    "entry {i} maps to {m}, outside 0..{}",
                    map.len()
                )));
            }
            if std::mem::replace(&mut seen[m], true) {
                return Err(AssignmentError::InvalidPermutation(format!("{m} appears twice")));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(d: usize) -> Self {
        Self { map: (0..d).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Self { map: inv }
    }

    /// `self ∘ other`: `i ↦ self(other(i))`.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "composing permutations of different sizes");
        Self {
            map: other.map.iter().map(|&j| self.map[j]).collect(),
        }
    }

    /// Gathers `xs` so that `out[i] = xs[π(i)]`.
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        assert_eq!(xs.len(), self.len(), "permutation size mismatch");
        self.map.iter().map(|&j| xs[j].clone()).collect()
    }

    pub fn as_matrix(&self) -> Matrix {
        let d = self.len();
        let mut m = Matrix::zeros(d, d);
        for (i, &j) in self.map.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = AssignmentError;

    fn try_from(map: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.map)
    }
}

fn check_square(c: &Matrix) -> Result<usize, AssignmentError> {
    if c.rows() != c.cols() {
        return Err(AssignmentError::NotSquare {
            rows: c.rows(),
            cols: c.cols(),
        });
    }
    if let Some(idx) = c.data().iter().position(|v| !v.is_finite()) {
        return Err(AssignmentError::NonFinite {
            row: idx / c.cols(),
            col: idx % c.cols(),
        });
    }
    Ok(c.rows())
}

/// `Σᵢ C[i, π(i)]`, summed in row order in `f64`.
pub fn captured_total(c: &Matrix, perm: &Permutation) -> f64 {
    perm.map
        .iter()
        .enumerate()
        .map(|(i, &j)| c.get(i, j) as f64)
        .sum()
}

/// Hungarian algorithm (shortest augmenting paths with potentials) for
/// minimization. Returns the row-to-column map and the reduced costs of the
/// final duals.
fn hungarian_min(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>) {
    // 1-based arrays; index 0 is a virtual column.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
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
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let mut reduced = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            reduced[i * n + j] = cost[i * n + j] - u[i + 1] - v[j + 1];
        }
    }
    (row_to_col, reduced)
}

/// Rewrites `row_to_col` into the lexicographically smallest perfect matching
/// that uses only tight edges. Every such matching is optimal for the duals.
fn lex_smallest_tight(row_to_col: &mut [usize], tight: &dyn Fn(usize, usize) -> bool) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut fixed = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    for i in 0..n {
        for j in 0..row_to_col[i] {
            if fixed[j] || !tight(i, j) {
                continue;
            }
            // Re-match row i to j: the row holding j must reach i's current
            // column through unfixed tight edges.
            let start = col_to_row[j];
            let target = row_to_col[i];
            parent.iter_mut().for_each(|p| *p = usize::MAX);
            let mut queue = std::collections::VecDeque::from([start]);
            let mut found = false;
            'bfs: while let Some(r) = queue.pop_front() {
                for c in 0..n {
                    if fixed[c] || c == j || parent[c] != usize::MAX || !tight(r, c) {
                        continue;
                    }
                    parent[c] = r;
                    if c == target {
                        found = true;
                        break 'bfs;
                    }
                    queue.push_back(col_to_row[c]);
                }
            }
            if !found {
                continue;
            }
            let mut c = target;
            loop {
                let r = parent[c];
                let prev = row_to_col[r];
                row_to_col[r] = c;
                col_to_row[c] = r;
                if r == start {
                    break;
                }
                c = prev;
            }
            row_to_col[i] = j;
            col_to_row[j] = i;
            break;
        }
        fixed[row_to_col[i]] = true;
    }
}

/// Maximizes `Σᵢ C[i, π(i)]` exactly. Among optimal maps the lexicographically
/// smallest is returned. The total is summed in row order in `f64`.
pub fn solve_lap(c: &Matrix) -> Result<(Permutation, f64), AssignmentError> {
    let n = check_square(c)?;
    let values: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
    Ok(lap_max(&values, n))
}

/// [`solve_lap`] over a row-major `n × n` table of `f64` values.
pub fn solve_lap_f64(values: &[f64], n: usize) -> Result<(Permutation, f64), AssignmentError> {
    if values.len() != n * n {
        return Err(AssignmentError::NotSquare {
            rows: n,
            cols: values.len().checked_div(n).unwrap_or(values.len()),
        });
    }
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(AssignmentError::NonFinite {
            row: idx / n,
            col: idx % n,
        });
    }
    Ok(lap_max(values, n))
}

fn lap_max(values: &[f64], n: usize) -> (Permutation, f64) {
    if n == 0 {
        return (Permutation::identity(0), 0.0);
    }
    let total = |map: &[usize]| -> f64 { map.iter().enumerate().map(|(i, &j)| values[i * n + j]).sum() };
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let scale = values.iter().fold(0f64, |m, &v| m.max(v.abs()));
    let cost: Vec<f64> = values.iter().map(|&v| max - v).collect();
    let (base, reduced) = hungarian_min(&cost, n);
    let base_total = total(&base);

    let tol = 1e-9 * (1.0 + scale);
    let mut lex = base.clone();
    lex_smallest_tight(&mut lex, &|i, j| reduced[i * n + j] <= tol);
    let lex_total = total(&lex);
    // A tolerance-tight edge can hide a last-bit loss; never trade optimality
    // for tie-breaking.
    if lex_total >= base_total {
        (Permutation { map: lex }, lex_total)
    } else {
        (Permutation { map: base }, base_total)
    }
}

fn next_permutation(xs: &mut [usize]) -> bool {
    let n = xs.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && xs[i - 1] >= xs[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while xs[j] <= xs[i - 1] {
        j -= 1;
    }
    xs.swap(i - 1, j);
    xs[i..].reverse();
    true
}

/// Exhaustive search over all `d!` maps in lexicographic order, keeping the
/// first strictly greater total. Limited to `d <= 9`.
pub fn brute_force_lap(c: &Matrix) -> Result<(Permutation, f64), AssignmentError> {
    let n = check_square(c)?;
    if n > BRUTE_FORCE_MAX {
        return Err(AssignmentError::TooLarge {
            d: n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let mut cur: Vec<usize> = (0..n).collect();
    let total = |m: &[usize]| -> f64 { m.iter().enumerate().map(|(i, &j)| c.get(i, j) as f64).sum() };
    let mut best = cur.clone();
    let mut best_total = total(&cur);
    while next_permutation(&mut cur) {
        let t = total(&cur);
        if t > best_total {
            best_total = t;
            best.copy_from_slice(&cur);
        }
    }
    Ok((Permutation { map: best }, best_total))
}

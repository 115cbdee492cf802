//! Bipartite matching between padded target phrases and decoder predictions.
//!
//! Targets are padded with empty elements up to the prediction count `N`.
//! Matching a real target `i` to prediction `j` costs
//! `-(mu * p_j + cos(v_i, v_hat_j))`; matching an empty element costs 0. The
//! assignment minimizing the summed cost is found exactly with a
//! shortest-augmenting-path Hungarian solver, and among optimal assignments
//! the lexicographically smallest one is returned.

use ndarray::Array2;

use crate::embedding::{cosine, Embedding};
use crate::error::{Error, Result};
use crate::phrase_graph::KeyPhrase;

/// Ground-truth phrases of one image, padded with empty elements to `size`.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub phrases: Vec<KeyPhrase>,
    /// Unit-norm text embeddings, parallel to `phrases`.
    pub embeddings: Vec<Embedding>,
    /// Padded size; indices `>= phrases.len()` are empty.
    pub size: usize,
}

impl TargetSet {
    pub fn new(phrases: Vec<KeyPhrase>, embeddings: Vec<Embedding>, size: usize) -> Result<Self> {
        if phrases.len() != embeddings.len() {
            return Err(Error::DimensionMismatch {
                expected: phrases.len(),
                got: embeddings.len(),
            });
        }
        if phrases.len() > size {
            return Err(Error::validation(format!(
                "{} target phrases exceed the prediction count {size}",
                phrases.len()
            )));
        }
        Ok(Self {
            phrases,
            embeddings,
            size,
        })
    }

    /// Number of real (non-empty) targets.
    pub fn real_count(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty_slot(&self, i: usize) -> bool {
        i >= self.phrases.len()
    }
}

/// Decoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Selection probabilities in `(0, 1)`.
    pub probs: Vec<f64>,
    /// Unit-norm semantic embeddings.
    pub semantics: Vec<Embedding>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, semantics: Vec<Embedding>) -> Result<Self> {
        if probs.len() != semantics.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.len(),
                got: semantics.len(),
            });
        }
        Ok(Self { probs, semantics })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `sigma[i]` is the prediction assigned to target slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Inverse permutation: target slot for each prediction.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (i, &j) in self.sigma.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

pub fn matching_cost(is_empty: bool, p_hat: f64, cos_sim: f64, mu: f64) -> f64 {
    if is_empty {
        0.0
    } else {
        -(mu * p_hat + cos_sim)
    }
}

pub fn build_cost_matrix(targets: &TargetSet, preds: &PredictionSet, mu: f64) -> Result<Array2<f64>> {
    let n = preds.len();
    if targets.size != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.size,
        });
    }
    let mut cost = Array2::zeros((n, n));
    for (i, v) in targets.embeddings.iter().enumerate() {
        for j in 0..n {
            let c = cosine(v, &preds.semantics[j])?;
            cost[[i, j]] = matching_cost(false, preds.probs[j], c, mu);
        }
    }
    Ok(cost)
}

/// Exact minimum-cost assignment of a square matrix.
///
/// Runs in `O(N^3)` for the optimum plus at most `O(N^4)` for the
/// lexicographic tie-break, which only explores zero-reduced-cost edges.
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::validation(format!("cost matrix is {n}x{m}, expected square")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            sigma: Vec::new(),
            total_cost: 0.0,
        });
    }

    let (mut row_of_col, u, v) = solve_potentials(cost);
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }

    let scale = cost.iter().fold(1.0_f64, |a, c| a.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost[[i, j]] - u[i] - v[j] <= tol;
    lexicographic_min(n, &tight, &mut col_of_row, &mut row_of_col);

    let total_cost = col_of_row.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(Assignment {
        sigma: col_of_row,
        total_cost,
    })
}

/// Shortest augmenting path with row/column potentials (Jonker-Volgenant
/// style). Returns the row matched to each column and the final duals, which
/// satisfy `cost[i][j] - u[i] - v[j] >= 0` with equality on matched pairs.
fn solve_potentials(cost: &Array2<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    const NONE: usize = usize::MAX;
    // Column index n is a virtual column holding the row being inserted.
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![NONE; n + 1];
    let mut way = vec![n; n + 1];

    for row in 0..n {
        owner[n] = row;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0, j]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == NONE {
                break;
            }
        }
        loop {
            let prev = way[j0];
            owner[j0] = owner[prev];
            j0 = prev;
            if j0 == n {
                break;
            }
        }
    }
    // The virtual column's potential is folded into u on the way; drop it.
    v.truncate(n);
    owner.truncate(n);
    (owner, u, v)
}

/// Rewrites a perfect matching on the tight-edge graph into the
/// lexicographically smallest perfect matching of that graph.
fn lexicographic_min(
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) {
    let mut locked_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if locked_col[j] || !tight(i, j) {
                continue;
            }
            if col_of_row[i] == j {
                break;
            }
            // Give column j to row i; its current owner must reach the column
            // row i releases along an alternating path of tight edges.
            let displaced = row_of_col[j];
            let target = col_of_row[i];
            if let Some(path) = alternating_path(n, tight, displaced, target, i, j, &locked_col, col_of_row, row_of_col) {
                col_of_row[i] = j;
                row_of_col[j] = i;
                for (r, c) in path {
                    col_of_row[r] = c;
                    row_of_col[c] = r;
                }
                break;
            }
        }
        locked_col[col_of_row[i]] = true;
    }
}

/// BFS from `start_row` to `target_col`, avoiding `skip_row`, `skip_col` and
/// locked columns. Returns the (row, new column) reassignments on success.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    start_row: usize,
    target_col: usize,
    skip_row: usize,
    skip_col: usize,
    locked_col: &[bool],
    col_of_row: &[usize],
    row_of_col: &[usize],
) -> Option<Vec<(usize, usize)>> {
    // parent_col[c] = row that reached column c.
    let mut parent_row = vec![usize::MAX; n];
    let mut seen_row = vec![false; n];
    let mut queue = std::collections::VecDeque::from([start_row]);
    seen_row[start_row] = true;
    seen_row[skip_row] = true;
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if c == skip_col || locked_col[c] || c == col_of_row[r] || parent_row[c] != usize::MAX {
                continue;
            }
            if !tight(r, c) {
                continue;
            }
            parent_row[c] = r;
            if c == target_col {
                let mut path = Vec::new();
                let mut col = c;
                loop {
                    let row = parent_row[col];
                    path.push((row, col));
                    if row == start_row {
                        return Some(path);
                    }
                    col = col_of_row[row];
                }
            }
            let next = row_of_col[c];
            if !seen_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

/// Cost matrix plus exact assignment for one example.
pub fn match_example(targets: &TargetSet, preds: &PredictionSet, mu: f64) -> Result<Assignment> {
    hungarian(&build_cost_matrix(targets, preds, mu)?)
}

#[cfg(test)]
pub(crate) mod oracle {
    use ndarray::Array2;

    /// Exhaustive search in lexicographic permutation order; the first strict
    /// minimum is the lexicographically smallest optimal permutation.
    pub fn brute_force(cost: &Array2<f64>) -> (Vec<usize>, f64) {
        let n = cost.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (perm.clone(), f64::INFINITY);
        loop {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            if total < best.1 {
                best = (perm.clone(), total);
            }
            if !next_permutation(&mut perm) {
                return best;
            }
        }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && p[i - 1] >= p[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while p[j] <= p[i - 1] {
            j -= 1;
        }
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }
}

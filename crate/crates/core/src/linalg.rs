//! Small sparse/banded linear algebra used by the KKT solver and the
//! structural checks.
//!
//! KKT matrices arising from time-discretized schedules are sparse with a
//! chain structure. They are reordered with reverse Cuthill-McKee, equilibrated
//! symmetrically and factored with a banded LU using partial pivoting. All
//! orderings and tie-breaks are fixed so factorizations are bitwise
//! reproducible.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is exactly singular at elimination step {step}")]
    Singular { step: usize },
    #[error("non-finite entry encountered in matrix")]
    NonFinite,
}

/// Square sparse matrix in coordinate form. Entries are sorted by
/// `(row, col)` and duplicates are summed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletMatrix {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletMatrix {
    pub fn from_triplets(dim: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside {dim}x{dim}");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        Self {
            dim,
            entries: merged,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self
            .entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(row, col)))
        {
            Ok(pos) => self.entries[pos].2,
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// Exact (bitwise) symmetry of stored values.
    pub fn is_symmetric(&self) -> bool {
        self.entries
            .iter()
            .all(|&(r, c, v)| r == c || self.get(c, r).to_bits() == v.to_bits())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern of
/// `matrix` (explicit zeros ignored). Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(matrix: &TripletMatrix) -> Vec<usize> {
    let n = matrix.dim();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(r, c, v) in matrix.entries() {
        if r != c && v != 0.0 {
            adjacency[r].push(c);
            adjacency[c].push(r);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(seed, &adjacency, &degree, &visited);
        visited[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let node = order[head];
            head += 1;
            let mut next: Vec<usize> = adjacency[node]
                .iter()
                .copied()
                .filter(|&j| !visited[j])
                .collect();
            next.sort_by_key(|&j| (degree[j], j));
            for j in next {
                visited[j] = true;
                order.push(j);
            }
        }
    }
    order.reverse();
    order
}

// George-Liu search restricted to the unvisited component containing `seed`.
fn pseudo_peripheral(
    seed: usize,
    adjacency: &[Vec<usize>],
    degree: &[usize],
    blocked: &[bool],
) -> usize {
    let levels = |root: usize| -> (usize, Vec<usize>) {
        let mut depth = vec![usize::MAX; adjacency.len()];
        depth[root] = 0;
        let mut queue = vec![root];
        let mut head = 0;
        let mut max_depth = 0;
        while head < queue.len() {
            let node = queue[head];
            head += 1;
            for &j in &adjacency[node] {
                if !blocked[j] && depth[j] == usize::MAX {
                    depth[j] = depth[node] + 1;
                    max_depth = max_depth.max(depth[j]);
                    queue.push(j);
                }
            }
        }
        let last: Vec<usize> = queue
            .into_iter()
            .filter(|&j| depth[j] == max_depth)
            .collect();
        (max_depth, last)
    };

    let mut root = seed;
    let (mut eccentricity, mut last) = levels(root);
    for _ in 0..8 {
        let candidate = *last
            .iter()
            .min_by_key(|&&j| (degree[j], j))
            .expect("level set is never empty");
        let (ecc, next_last) = levels(candidate);
        if ecc <= eccentricity {
            break;
        }
        root = candidate;
        eccentricity = ecc;
        last = next_last;
    }
    root
}

/// Symmetric Ruiz equilibration: returns `d` such that `diag(d) A diag(d)`
/// has rows with max-abs entry close to one. Rows that are entirely zero keep
/// a unit scale.
pub fn ruiz_scaling(matrix: &TripletMatrix, sweeps: usize) -> Vec<f64> {
    let n = matrix.dim();
    let mut d = vec![1.0; n];
    let mut row_max = vec![0.0_f64; n];
    for _ in 0..sweeps {
        row_max.iter_mut().for_each(|m| *m = 0.0);
        for &(r, c, v) in matrix.entries() {
            let scaled = (d[r] * v * d[c]).abs();
            if scaled > row_max[r] {
                row_max[r] = scaled;
            }
        }
        for (di, &m) in d.iter_mut().zip(&row_max) {
            if m > 0.0 && m.is_finite() {
                *di /= m.sqrt();
            }
        }
    }
    d
}

/// Banded LU factorization with partial pivoting of a symmetrically
/// reordered and equilibrated square matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
    perm: Vec<usize>,
    scale: Vec<f64>,
    min_pivot: f64,
}

impl BandedLu {
    /// Factor `matrix`. On exact singularity the error reports the step; the
    /// smallest pivot seen is then zero.
    pub fn factor(matrix: &TripletMatrix) -> Result<Self, LinalgError> {
        let n = matrix.dim();
        if matrix.entries().iter().any(|e| !e.2.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let perm = reverse_cuthill_mckee(matrix);
        let mut position = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            position[old] = new;
        }
        let scale = ruiz_scaling(matrix, 12);

        let mut lower = 0usize;
        let mut upper = 0usize;
        for &(r, c, v) in matrix.entries() {
            if v == 0.0 {
                continue;
            }
            let (pr, pc) = (position[r], position[c]);
            if pr > pc {
                lower = lower.max(pr - pc);
            } else {
                upper = upper.max(pc - pr);
            }
        }
        let width = 2 * lower + upper + 1;
        let mut lu = Self {
            n,
            lower,
            upper,
            width,
            band: vec![0.0; n * width],
            pivots: vec![0; n],
            perm,
            scale,
            min_pivot: f64::INFINITY,
        };
        for &(r, c, v) in matrix.entries() {
            if v == 0.0 {
                continue;
            }
            let idx = lu.index(position[r], position[c]);
            lu.band[idx] += lu.scale[r] * v * lu.scale[c];
        }
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + (col + self.lower - row)
    }

    fn eliminate(&mut self) -> Result<(), LinalgError> {
        let n = self.n;
        let reach = self.lower + self.upper;
        for k in 0..n {
            let last_row = (k + self.lower).min(n - 1);
            let last_col = (k + reach).min(n - 1);

            let mut pivot_row = k;
            let mut pivot_abs = self.band[self.index(k, k)].abs();
            for i in k + 1..=last_row {
                let a = self.band[self.index(i, k)].abs();
                if a > pivot_abs {
                    pivot_abs = a;
                    pivot_row = i;
                }
            }
            self.pivots[k] = pivot_row;
            self.min_pivot = self.min_pivot.min(pivot_abs);
            if pivot_abs == 0.0 {
                self.min_pivot = 0.0;
                return Err(LinalgError::Singular { step: k });
            }
            if pivot_row != k {
                for j in k..=last_col {
                    let a = self.index(k, j);
                    let b = self.index(pivot_row, j);
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.index(k, k)];
            for i in k + 1..=last_row {
                let ik = self.index(i, k);
                let factor = self.band[ik] / pivot;
                self.band[ik] = factor;
                if factor == 0.0 {
                    continue;
                }
                let row_k = self.index(k, k);
                let row_i = self.index(i, k);
                for offset in 1..=(last_col - k) {
                    let update = factor * self.band[row_k + offset];
                    self.band[row_i + offset] -= update;
                }
            }
        }
        Ok(())
    }

    /// Smallest absolute pivot of the equilibrated factorization.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.lower, self.upper)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(rhs.len(), n);
        let reach = self.lower + self.upper;
        let mut b: Vec<f64> = self
            .perm
            .iter()
            .map(|&old| rhs[old] * self.scale[old])
            .collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                let last = (k + self.lower).min(n - 1);
                for (i, bi) in b.iter_mut().enumerate().take(last + 1).skip(k + 1) {
                    *bi -= self.band[self.index(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            let row = self.index(k, k);
            for offset in 1..=((k + reach).min(n - 1) - k) {
                s -= self.band[row + offset] * b[k + offset];
            }
            b[k] = s / self.band[row];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = b[new] * self.scale[old];
        }
        x
    }
}

/// Numerical rank by Gaussian elimination with partial (row) pivoting over
/// columns taken in order. A column whose best remaining pivot is below
/// `rel_tol * max|a_ij|` is treated as dependent.
pub fn numerical_rank(matrix: &DMatrix<f64>, rel_tol: f64) -> usize {
    let (rows, cols) = matrix.shape();
    let norm = matrix.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if norm == 0.0 {
        return 0;
    }
    let tol = rel_tol * norm;
    // Row-major copy for row operations.
    let mut a: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..cols).map(|j| matrix[(i, j)]).collect())
        .collect();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let mut best = rank;
        let mut best_abs = a[rank][col].abs();
        for (i, row) in a.iter().enumerate().skip(rank + 1) {
            if row[col].abs() > best_abs {
                best_abs = row[col].abs();
                best = i;
            }
        }
        if best_abs <= tol {
            continue;
        }
        a.swap(rank, best);
        let (head, tail) = a.split_at_mut(rank + 1);
        let pivot_row = &head[rank];
        let pivot = pivot_row[col];
        for row in tail.iter_mut() {
            let factor = row[col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..cols {
                row[j] -= factor * pivot_row[j];
            }
        }
        rank += 1;
    }
    rank
}

//! Sparse symmetric positive-definite factorization.
//!
//! Rows are reordered with reverse Cuthill-McKee, then factored in variable-band
//! (skyline) storage: row `i` of `L` keeps columns `first[i]..=i`. Fill-in never
//! leaves the envelope, so no symbolic phase is needed.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Symmetric matrix given by its diagonal and strictly-lower entries.
#[derive(Debug, Clone)]
pub struct SparseSymmetric {
    pub n: usize,
    pub diag: Vec<f64>,
    /// `(i, j, value)` with `i > j`; repeated positions are summed.
    pub lower: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    pub fn new(n: usize) -> Self {
        SparseSymmetric {
            n,
            diag: vec![0.0; n],
            lower: Vec::new(),
        }
    }

    /// Adds `value` at `(i, j)` and `(j, i)`; diagonal when `i == j`.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.diag[i] += value,
            std::cmp::Ordering::Greater => self.lower.push((i, j, value)),
            std::cmp::Ordering::Less => self.lower.push((j, i, value)),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (i, &d) in self.diag.iter().enumerate() {
            m[i][i] = d;
        }
        for &(i, j, v) in &self.lower {
            m[i][j] += v;
            m[j][i] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for &(i, j, v) in &self.lower {
            y[i] += v * x[j];
            y[j] += v * x[i];
        }
        y
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j, _) in &self.lower {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Reverse Cuthill-McKee ordering; returns `order[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree = |v: usize| adj[v].len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree(v), v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree(u), u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    n: usize,
    /// `order[new] = old`
    order: Vec<usize>,
    /// `position[old] = new`
    position: Vec<usize>,
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl SkylineCholesky {
    pub fn factor(a: &SparseSymmetric) -> Result<Self> {
        let n = a.n;
        let order = reverse_cuthill_mckee(&a.neighbours());
        let mut position = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in &a.lower {
            let (pi, pj) = (position[i], position[j]);
            let (hi, lo) = (pi.max(pj), pi.min(pj));
            first[hi] = first[hi].min(lo);
        }
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i - first[i] + 1]).collect();
        for (old, &d) in a.diag.iter().enumerate() {
            let i = position[old];
            rows[i][i - first[i]] += d;
        }
        for &(i, j, v) in &a.lower {
            let (pi, pj) = (position[i], position[j]);
            let (hi, lo) = (pi.max(pj), pi.min(pj));
            rows[hi][lo - first[hi]] += v;
        }

        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0f64;
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = rows.split_at_mut(i);
            let row_i = &mut rest[0];
            for j in fi..i {
                let fj = first[j];
                let row_j = &done[j];
                let mut s = row_i[j - fi];
                for k in fi.max(fj)..j {
                    s -= row_i[k - fi] * row_j[k - fj];
                }
                row_i[j - fi] = s / row_j[j - fj];
            }
            let mut s = row_i[i - fi];
            for k in fi..i {
                s -= row_i[k - fi] * row_i[k - fi];
            }
            if !(s > 0.0) || !s.is_finite() {
                let estimate = if min_pivot.is_finite() {
                    format!("{:.3e}", (max_pivot / min_pivot).powi(2))
                } else {
                    "n/a".into()
                };
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite: pivot {s:.3e} at row {} (original index {}); \
                     condition estimate so far {estimate}",
                    i, order[i]
                )));
            }
            let l = s.sqrt();
            min_pivot = min_pivot.min(l);
            max_pivot = max_pivot.max(l);
            row_i[i - fi] = l;
        }
        Ok(SkylineCholesky {
            n,
            order,
            position,
            first,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L`.
    pub fn envelope_size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `(max L_ii / min L_ii)^2`, a cheap lower bound on the condition number.
    pub fn condition_estimate(&self) -> f64 {
        let diag = (0..self.n).map(|i| self.rows[i][i - self.first[i]]);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        (hi / lo).powi(2)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.rows[i][i - self.first[i]].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y: Vec<f64> = self.order.iter().map(|&old| b[old]).collect();
        self.solve_permuted(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, v) in y.into_iter().enumerate() {
            x[self.order[new]] = v;
        }
        x
    }

    fn solve_permuted(&self, y: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.rows[i];
            let mut s = y[i];
            for k in fi..i {
                s -= row[k - fi] * y[k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            y[i] /= row[i - fi];
            let xi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * xi;
            }
        }
    }

    /// Column `j` of `A^{-1}` in original indexing.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        e[self.position[j]] = 1.0;
        self.solve_permuted(&mut e);
        let mut x = vec![0.0; self.n];
        for (new, v) in e.into_iter().enumerate() {
            x[self.order[new]] = v;
        }
        x
    }
}

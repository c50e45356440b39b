//! Matching achievement sequences across episodes.

mod hungarian;
pub mod oracle;
mod partial;

use serde::{Deserialize, Serialize};

pub use hungarian::hungarian_match;
pub use partial::{solve_partial_ot, OtConfig, OtSolution};

/// Dense row-major matrix used for costs and transport plans.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// `1 - cosine` between achievement representations; entries in `[0, 2]`.
pub type CostMatrix = Matrix;
pub type TransportPlan = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Cosine-distance costs between two sets of unit vectors.
    pub fn cosine_costs(a: &[Vec<f64>], b: &[Vec<f64>]) -> CostMatrix {
        let data = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (1.0 - dot(x, y)).clamp(0.0, 2.0)))
            .collect();
        Self::new(a.len(), b.len(), data)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.at(i, j));
            }
        }
        t
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j)).sum())
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of the partial-transport constraints:
    /// row and column sums at most 1, total mass `min(rows, cols)`.
    pub fn constraint_violation(&self) -> f64 {
        let over = |s: f64| (s - 1.0).max(0.0);
        let rows = self.row_sums().into_iter().map(over).fold(0.0, f64::max);
        let cols = self.col_sums().into_iter().map(over).fold(0.0, f64::max);
        let mass = (self.total() - self.rows.min(self.cols) as f64).abs();
        let neg = self.data.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max);
        rows.max(cols).max(mass).max(neg)
    }

    /// `<T, M> + alpha * sum T log T`, with `0 log 0 = 0`.
    pub fn entropic_objective(&self, cost: &CostMatrix, alpha: f64) -> f64 {
        self.data
            .iter()
            .zip(&cost.data)
            .map(|(&t, &c)| t * c + if t > 0.0 { alpha * t * t.ln() } else { 0.0 })
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index pairs with each row and each column used at most once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMatching {
    /// Sorted by row index.
    pub pairs: Vec<(usize, usize)>,
}

impl HardMatching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_of(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == i).map(|p| p.1)
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.at(i, j)).sum()
    }

    pub fn is_valid(&self) -> bool {
        let mut rows = std::collections::HashSet::new();
        let mut cols = std::collections::HashSet::new();
        self.pairs.iter().all(|&(i, j)| rows.insert(i) && cols.insert(j))
    }
}

/// Entries of the plan above one half.
///
/// On a feasible plan no row or column can hold two such entries, but plans
/// are only feasible up to a tolerance, so conflicts are still resolved by
/// keeping the larger entry.
pub fn threshold_match(plan: &TransportPlan) -> HardMatching {
    let mut cand: Vec<(usize, usize, f64)> = (0..plan.rows)
        .flat_map(|i| (0..plan.cols).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, plan.at(i, j)))
        .filter(|c| c.2 > 0.5)
        .collect();
    cand.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut row_used = vec![false; plan.rows];
    let mut col_used = vec![false; plan.cols];
    let mut pairs = Vec::new();
    for (i, j, _) in cand {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    HardMatching { pairs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn threshold_diagonal() {
        let t = m(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert_eq!(threshold_match(&t).pairs, vec![(0, 0), (1, 1)]);
        let t = m(&[&[0.6, 0.4], &[0.45, 0.55]]);
        assert_eq!(threshold_match(&t).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn threshold_uniform_is_empty() {
        for n in 2..6 {
            let t = Matrix::new(n, n, vec![1.0 / n as f64; n * n]);
            assert!(threshold_match(&t).is_empty());
        }
    }

    #[test]
    fn threshold_resolves_tolerance_conflicts() {
        let t = m(&[&[0.5000004, 0.5000003]]);
        assert_eq!(threshold_match(&t).pairs, vec![(0, 0)]);
    }

    #[test]
    fn cosine_costs_in_range() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![-1.0, 0.0]];
        let c = Matrix::cosine_costs(&a, &b);
        assert_eq!(c.data, vec![2.0, 1.0]);
    }
}

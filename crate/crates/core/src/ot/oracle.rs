//! Verification oracles for small instances. Slow on purpose; tests only.
//!
//! The partial-transport oracle works on the dual instead of the primal
//! projections: for `u, v >= 0` and free `w`, the plan
//! `T_ij = exp((-M_ij - u_i - v_j + w) / alpha - 1)` minimizes the
//! Lagrangian and `-(alpha * sum T + sum u + sum v - w * s)` is a lower
//! bound on the optimal objective. That bound is maximized with projected
//! Newton steps. A coarse primal grid search supplies an independent upper
//! bound.

use super::{CostMatrix, HardMatching, TransportPlan};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub plan: TransportPlan,
    /// Entropic objective of `plan`.
    pub objective: f64,
    /// Certified lower bound on the optimal objective.
    pub dual_bound: f64,
    /// Best objective over the feasible grid points.
    pub grid_objective: f64,
}

struct Dual<'a> {
    cost: &'a CostMatrix,
    alpha: f64,
    mass: f64,
}

impl Dual<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.cost.rows, self.cost.cols)
    }

    fn plan(&self, x: &[f64]) -> TransportPlan {
        let (m, n) = self.dims();
        let mut t = TransportPlan::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let e = (-self.cost.at(i, j) - x[i] - x[m + j] + x[m + n]) / self.alpha - 1.0;
                t.set(i, j, e.exp());
            }
        }
        t
    }

    /// Negated dual function; convex.
    fn value(&self, x: &[f64]) -> f64 {
        let (m, n) = self.dims();
        self.alpha * self.plan(x).total() + x[..m + n].iter().sum::<f64>() - self.mass * x[m + n]
    }

    fn gradient_hessian(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (m, n) = self.dims();
        let k = m + n + 1;
        let t = self.plan(x);
        let (r, c) = (t.row_sums(), t.col_sums());
        let mut g = vec![0.0; k];
        let mut h = vec![vec![0.0; k]; k];
        let a = self.alpha;
        for i in 0..m {
            g[i] = 1.0 - r[i];
            h[i][i] = r[i] / a;
            h[i][m + n] = -r[i] / a;
            h[m + n][i] = -r[i] / a;
            for j in 0..n {
                h[i][m + j] = t.at(i, j) / a;
                h[m + j][i] = t.at(i, j) / a;
            }
        }
        for j in 0..n {
            g[m + j] = 1.0 - c[j];
            h[m + j][m + j] = c[j] / a;
            h[m + j][m + n] = -c[j] / a;
            h[m + n][m + j] = -c[j] / a;
        }
        g[m + n] = t.total() - self.mass;
        h[m + n][m + n] = t.total() / a;
        (g, h)
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
#[allow(clippy::needless_range_loop)]
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn dual_newton(d: &Dual) -> Vec<f64> {
    let (m, n) = d.dims();
    let k = m + n + 1;
    let bounded = m + n;
    let mut x = vec![0.0; k];
    // Start with the mass constraint satisfied.
    x[k - 1] = d.alpha * (d.mass.ln() - d.plan(&x).total().ln());
    let project = |x: &mut [f64]| x[..bounded].iter_mut().for_each(|v| *v = v.max(0.0));
    for _ in 0..500 {
        let (g, h) = d.gradient_hessian(&x);
        let free: Vec<usize> = (0..k).filter(|&i| i >= bounded || x[i] > 1e-12 || g[i] < 0.0).collect();
        let pg: f64 = (0..k)
            .map(|i| if free.contains(&i) { g[i].abs() } else { 0.0 })
            .fold(0.0, f64::max);
        if pg < 1e-14 {
            break;
        }
        let damp = 1e-12
            * (1.0
                + h.iter()
                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max));
        let hf: Vec<Vec<f64>> = free
            .iter()
            .map(|&i| {
                free.iter()
                    .map(|&j| h[i][j] + if i == j { damp } else { 0.0 })
                    .collect()
            })
            .collect();
        let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
        let mut dir = vec![0.0; k];
        match solve_linear(hf, rhs) {
            Some(df) => free.iter().zip(df).for_each(|(&i, v)| dir[i] = v),
            None => free.iter().for_each(|&i| dir[i] = -g[i]),
        }
        if dir.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            free.iter().for_each(|&i| dir[i] = -g[i]);
        }
        let f0 = d.value(&x);
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-20 {
            let mut cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            project(&mut cand);
            let decrease: f64 = g
                .iter()
                .zip(cand.iter().zip(&x))
                .map(|(gi, (c, xi))| gi * (c - xi))
                .sum();
            let f1 = d.value(&cand);
            if f1 <= f0 + 1e-4 * decrease || (f1 - f0).abs() <= 1e-15 * f0.abs().max(1.0) && decrease < 0.0 {
                moved = f1 < f0 || cand != x;
                x = cand;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// Coarse enumeration of feasible plans whose free entries are multiples
/// of `1 / resolution`; the last entry takes up the remaining mass.
fn grid_search(cost: &CostMatrix, alpha: f64, resolution: usize) -> f64 {
    let (m, n) = (cost.rows, cost.cols);
    let mass = m.min(n) as f64;
    let cells = m * n;
    let mut best = f64::INFINITY;
    let mut digits = vec![0usize; cells - 1];
    let mut plan = TransportPlan::zeros(m, n);
    loop {
        let mut partial = 0.0;
        for (k, &d) in digits.iter().enumerate() {
            plan.data[k] = d as f64 / resolution as f64;
            partial += plan.data[k];
        }
        plan.data[cells - 1] = mass - partial;
        if plan.constraint_violation() < 1e-12 {
            best = best.min(plan.entropic_objective(cost, alpha));
        }
        let mut k = 0;
        loop {
            if k == digits.len() {
                return best;
            }
            digits[k] += 1;
            if digits[k] <= resolution {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// Reference solution of the entropic partial transport problem for
/// instances with at most six cells.
pub fn brute_force_partial_ot(cost: &CostMatrix, alpha: f64, resolution: usize) -> Result<OracleSolution> {
    let (m, n) = (cost.rows, cost.cols);
    if m * n > 6 || m * n == 0 {
        return Err(Error::OracleTooLarge { m, n });
    }
    let d = Dual {
        cost,
        alpha,
        mass: m.min(n) as f64,
    };
    let x = dual_newton(&d);
    let plan = d.plan(&x);
    Ok(OracleSolution {
        objective: plan.entropic_objective(cost, alpha),
        dual_bound: -d.value(&x),
        grid_objective: grid_search(cost, alpha, resolution),
        plan,
    })
}

/// Calls `f` with every injective map from rows to columns (rows <= cols).
fn for_each_injection(m: usize, n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(i: usize, m: usize, n: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if i == m {
            f(cur);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(i + 1, m, n, used, cur, f);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(0, m, n, &mut vec![false; n], &mut Vec::new(), f);
}

/// Exhaustive minimum-cost matching covering the smaller side, with the
/// cost gap to the runner-up (`INFINITY` when there is only one matching).
///
/// With total mass `min(m, n)` every vertex of the unregularized feasible
/// set is such a matching, so this is also the exact LP optimum.
pub fn exhaustive_matching(cost: &CostMatrix) -> (HardMatching, f64, f64) {
    if cost.rows > cost.cols {
        let (h, c, gap) = exhaustive_matching(&cost.transpose());
        let mut pairs: Vec<_> = h.pairs.into_iter().map(|(i, j)| (j, i)).collect();
        pairs.sort_unstable();
        return (HardMatching { pairs }, c, gap);
    }
    let mut best = (Vec::new(), f64::INFINITY);
    let mut second = f64::INFINITY;
    for_each_injection(cost.rows, cost.cols, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
        if c < best.1 {
            second = best.1;
            best = (p.to_vec(), c);
        } else if c < second {
            second = c;
        }
    });
    let pairs = best.0.into_iter().enumerate().collect();
    (HardMatching { pairs }, best.1, second - best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_reproduces_one_row_closed_form() {
        let c = CostMatrix::new(1, 2, vec![0.0, 1.0]);
        let o = brute_force_partial_ot(&c, 0.05, 20).unwrap();
        let t = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((o.plan.data[0] - t).abs() < 1e-9);
        assert!(o.objective - o.dual_bound < 1e-10);
        assert!(o.grid_objective >= o.objective - 1e-12);
    }

    #[test]
    fn large_instances_rejected() {
        assert!(brute_force_partial_ot(&CostMatrix::zeros(3, 3), 0.05, 4).is_err());
    }

    #[test]
    fn exhaustive_matching_swap() {
        let c = CostMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let (h, cost, gap) = exhaustive_matching(&c);
        assert_eq!(h.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(cost, 0.0);
        assert_eq!(gap, 2.0);
    }
}

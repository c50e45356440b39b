//! Entropic partial transport by alternating KL projections with Dykstra
//! corrections, all in the log domain.
//!
//! A sweep projects onto `{T 1 <= 1, 1^T T 1 = s}` and then onto
//! `{T^T 1 <= 1, 1^T T 1 = s}` with `s = min(m, n)`. Each projection
//! rescales rows (or columns) by `min(e^w, 1 / sum)` for one scalar `w`
//! found by water-filling, so its Dykstra correction collapses to a vector
//! of negated log scales. Keeping the mass constraint inside both
//! projections matters: cycling through row caps, column caps and the
//! mass as three separate sets converges sublinearly.

use serde::{Deserialize, Serialize};

use super::{CostMatrix, TransportPlan};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    /// Entropic regularization weight.
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Anderson mixing depth on the dual iterates; 0 runs plain sweeps.
    pub anderson_depth: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            max_iters: 1000,
            tol: 1e-6,
            anderson_depth: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    pub plan: TransportPlan,
    pub iterations: usize,
    /// Constraint violation of the returned plan.
    pub residual: f64,
    pub converged: bool,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log scales `min(w, -log_sums[i])` that cap every group at 1 and bring
/// the total to `mass`. Requires `mass <= groups`; when equal, every group
/// is normalized to exactly 1.
fn capped_scales(log_sums: &[f64], mass: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..log_sums.len()).collect();
    order.sort_by(|&a, &b| log_sums[b].total_cmp(&log_sums[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| log_sums[i]).collect();
    // With the k largest groups saturated, the rest share mass - k.
    let mut w = f64::INFINITY;
    for k in 0..sorted.len() {
        let rest = mass - k as f64;
        if rest <= 0.0 {
            break;
        }
        let cand = rest.ln() - log_sum_exp(sorted[k..].iter().copied());
        let rest_fits = sorted[k] + cand <= 1e-12;
        let top_saturates = k == 0 || sorted[k - 1] + cand >= -1e-12;
        if rest_fits && top_saturates {
            w = cand;
            break;
        }
    }
    log_sums.iter().map(|&l| w.min(-l)).collect()
}

struct Sweep<'a> {
    cost: &'a CostMatrix,
    alpha: f64,
    mass: f64,
}

impl Sweep<'_> {
    fn log_kernel(&self, i: usize, j: usize) -> f64 {
        -self.cost.at(i, j) / self.alpha
    }

    /// One row projection then one column projection, starting from column
    /// corrections `v`. Returns the new `(row, column)` corrections; the
    /// plan is `exp(log_kernel - u_i - v_j)`.
    fn apply(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.cost.rows, self.cost.cols);
        let sums: Vec<f64> = (0..m)
            .map(|i| log_sum_exp((0..n).map(|j| self.log_kernel(i, j) - v[j])))
            .collect();
        let u: Vec<f64> = capped_scales(&sums, self.mass).into_iter().map(|s| -s).collect();
        let sums: Vec<f64> = (0..n)
            .map(|j| log_sum_exp((0..m).map(|i| self.log_kernel(i, j) - u[i])))
            .collect();
        let v = capped_scales(&sums, self.mass).into_iter().map(|s| -s).collect();
        (u, v)
    }

    fn evaluate(&self, v: Vec<f64>) -> Evaluated {
        let (u1, v_next) = self.apply(&v);
        // How far the column projection moves the row-projected plan; zero
        // exactly at the fixed point.
        let before = self.plan(&u1, &v);
        let plan = self.plan(&u1, &v_next);
        Evaluated {
            change: plan.max_abs_diff(&before),
            gap: self.duality_gap(&plan, &u1, &v_next),
            plan,
            v,
            v_next,
        }
    }

    /// Objective gap between `plan` and a dual lower bound built from its
    /// log scales: shifting the row scales by their minimum leaves
    /// nonnegative cap multipliers (likewise for columns) and the shifts
    /// absorb the mass multiplier. With the mass constraint exact, the gap is
    /// the complementary slackness defect of the caps.
    fn duality_gap(&self, plan: &TransportPlan, u: &[f64], v: &[f64]) -> f64 {
        let defect = |scales: &[f64], sums: Vec<f64>| {
            let floor = scales.iter().copied().fold(f64::INFINITY, f64::min);
            scales
                .iter()
                .zip(sums)
                .map(|(a, s)| self.alpha * (a - floor) * (1.0 - s).abs())
                .sum::<f64>()
        };
        defect(u, plan.row_sums()) + defect(v, plan.col_sums())
    }

    fn plan(&self, u: &[f64], v: &[f64]) -> TransportPlan {
        let (m, n) = (self.cost.rows, self.cost.cols);
        let data = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (self.log_kernel(i, j) - u[i] - v[j]).exp())
            .collect();
        TransportPlan::new(m, n, data)
    }
}

struct Evaluated {
    v: Vec<f64>,
    v_next: Vec<f64>,
    plan: TransportPlan,
    change: f64,
    gap: f64,
}

/// Type-II Anderson mixing over the last few iterates of a fixed-point map.
struct Anderson {
    depth: usize,
    xs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            xs: Vec::new(),
            rs: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.xs.clear();
        self.rs.clear();
    }

    /// Next iterate from point `x` with residual `r = G(x) - x`.
    fn next(&mut self, x: &[f64], r: &[f64]) -> Vec<f64> {
        self.xs.push(x.to_vec());
        self.rs.push(r.to_vec());
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.rs.remove(0);
        }
        let plain: Vec<f64> = x.iter().zip(r).map(|(a, b)| a + b).collect();
        let k = self.xs.len() - 1;
        if k == 0 {
            return plain;
        }
        let diff = |v: &[Vec<f64>], c: usize| -> Vec<f64> { v[c + 1].iter().zip(&v[c]).map(|(a, b)| a - b).collect() };
        let dr: Vec<Vec<f64>> = (0..k).map(|c| diff(&self.rs, c)).collect();
        let dx: Vec<Vec<f64>> = (0..k).map(|c| diff(&self.xs, c)).collect();
        // Normal equations of min |r - dR g|, lightly ridged.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut a: Vec<Vec<f64>> = (0..k).map(|p| (0..k).map(|q| dot(&dr[p], &dr[q])).collect()).collect();
        let scale = (0..k).map(|p| a[p][p]).fold(0.0, f64::max);
        if scale == 0.0 {
            return plain;
        }
        (0..k).for_each(|p| a[p][p] += 1e-10 * scale);
        let b: Vec<f64> = (0..k).map(|p| dot(&dr[p], r)).collect();
        let Some(gamma) = solve_small(a, b) else {
            self.reset();
            return plain;
        };
        let mut out = plain;
        for c in 0..k {
            for (o, (x, y)) in out.iter_mut().zip(dx[c].iter().zip(&dr[c])) {
                *o -= gamma[c] * (x + y);
            }
        }
        if out.iter().all(|v| v.is_finite()) {
            out
        } else {
            self.reset();
            x.iter().zip(r).map(|(a, b)| a + b).collect()
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    Some(x)
}

/// Minimizes `<T, M> + alpha * sum T log T` over nonnegative `T` with row
/// and column sums at most 1 and total mass `min(m, n)`.
///
/// Stops once the constraint violation and the certified objective gap are
/// both below `tol`. Empty inputs give an empty plan.
pub fn solve_partial_ot(cost: &CostMatrix, cfg: &OtConfig) -> OtSolution {
    assert!(cfg.alpha > 0.0, "alpha must be positive");
    let (m, n) = (cost.rows, cost.cols);
    if m == 0 || n == 0 {
        return OtSolution {
            plan: TransportPlan::zeros(m, n),
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let sweep = Sweep {
        cost,
        alpha: cfg.alpha,
        mass: m.min(n) as f64,
    };
    let mut mixer = Anderson::new(cfg.anderson_depth);
    let mut cur = sweep.evaluate(vec![0.0; n]);
    let mut iterations = 1;
    let mut converged = false;
    loop {
        if cur.gap < cfg.tol && cur.plan.constraint_violation() < cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let plain = sweep.evaluate(cur.v_next.clone());
        iterations += 1;
        cur = if cfg.anderson_depth == 0 {
            plain
        } else {
            // Keep a mixed iterate only when it beats the plain sweep; near
            // kinks of the capped scales a full extrapolation can overshoot,
            // so shorter ones are tried too.
            let r: Vec<f64> = cur.v_next.iter().zip(&cur.v).map(|(a, b)| a - b).collect();
            let target = mixer.next(&cur.v, &r);
            let mut chosen = None;
            for t in [1.0, 0.1, 0.01] {
                let v: Vec<f64> = plain.v.iter().zip(&target).map(|(p, q)| p + t * (q - p)).collect();
                let mixed = sweep.evaluate(v);
                iterations += 1;
                if mixed.change < plain.change {
                    chosen = Some(mixed);
                    break;
                }
            }
            chosen.unwrap_or(plain)
        };
    }
    let plan = cur.plan;
    let residual = plan.constraint_violation();
    if !converged {
        log::debug!("partial OT {m}x{n} stopped after {iterations} sweeps, residual {residual:.3e}");
    }
    OtSolution {
        plan,
        iterations,
        residual,
        converged,
    }
}

use super::{CostMatrix, HardMatching};

/// Minimum-cost matching that covers the smaller side (Kuhn-Munkres with
/// row/column potentials, O(n^2 m)).
pub fn hungarian_match(cost: &CostMatrix) -> HardMatching {
    if cost.is_empty() {
        return HardMatching::default();
    }
    if cost.rows > cost.cols {
        let mut t = hungarian_match(&cost.transpose());
        t.pairs.iter_mut().for_each(|p| *p = (p.1, p.0));
        t.pairs.sort_unstable();
        return t;
    }
    let (n, m) = (cost.rows, cost.cols);
    // 1-based with a virtual column 0, following the classical formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    HardMatching { pairs }
}

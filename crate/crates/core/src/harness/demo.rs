//! Matching two recorded episodes by their achievement representations.

use std::fmt::Write as _;

use ndauto::{Graph, ParamStore};

use crate::distill::encode_batch;
use crate::error::Result;
use crate::net::AgentNet;
use crate::ot::{solve_partial_ot, threshold_match, CostMatrix, HardMatching, Matrix, OtConfig, OtSolution};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug)]
pub struct MatchDemo {
    /// Achievement ids unlocked in each episode, in order.
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub cost: CostMatrix,
    pub solution: OtSolution,
    pub matching: HardMatching,
}

impl MatchDemo {
    /// Pairs of matched achievement ids.
    pub fn matched_labels(&self) -> Vec<(usize, usize)> {
        self.matching
            .pairs
            .iter()
            .map(|&(i, j)| (self.labels_a[i], self.labels_b[j]))
            .collect()
    }

    /// Whether the matching pairs exactly the achievements the two episodes
    /// share.
    pub fn matches_labels(&self) -> bool {
        let mut truth: Vec<(usize, usize)> = self
            .labels_a
            .iter()
            .filter(|a| self.labels_b.contains(a))
            .map(|&a| (a, a))
            .collect();
        let mut got = self.matched_labels();
        truth.sort_unstable();
        got.sort_unstable();
        truth == got
    }

    pub fn tables(&self, names: &[String]) -> String {
        let name = |id: usize| names.get(id).cloned().unwrap_or_else(|| id.to_string());
        let ra: Vec<String> = self.labels_a.iter().map(|&i| name(i)).collect();
        let cb: Vec<String> = self.labels_b.iter().map(|&i| name(i)).collect();
        let mut out = String::new();
        out += "cost\n";
        out += &table(&ra, &cb, &self.cost, |x| format!("{x:.3}"));
        out += &format!(
            "\nplan (iterations {}, residual {:.1e})\n",
            self.solution.iterations, self.solution.residual
        );
        out += &table(&ra, &cb, &self.solution.plan, |x| format!("{x:.3}"));
        out += "\nmatching\n";
        let mut hard = Matrix::zeros(ra.len(), cb.len());
        for &(i, j) in &self.matching.pairs {
            hard.set(i, j, 1.0);
        }
        out += &table(&ra, &cb, &hard, |x| if x > 0.0 { "x".into() } else { ".".into() });
        out
    }

    /// Long-format CSV: `a,b,label_a,label_b,cost,plan,matched`.
    pub fn csv(&self) -> String {
        let mut out = String::from("a,b,label_a,label_b,cost,plan,matched\n");
        for i in 0..self.labels_a.len() {
            for j in 0..self.labels_b.len() {
                let _ = writeln!(
                    out,
                    "{i},{j},{},{},{},{},{}",
                    self.labels_a[i],
                    self.labels_b[j],
                    self.cost.at(i, j),
                    self.solution.plan.at(i, j),
                    u8::from(self.matching.target_of(i) == Some(j))
                );
            }
        }
        out
    }
}

fn table(rows: &[String], cols: &[String], m: &Matrix, fmt: impl Fn(f64) -> String) -> String {
    let cells: Vec<Vec<String>> = (0..rows.len())
        .map(|i| (0..cols.len()).map(|j| fmt(m.at(i, j))).collect())
        .collect();
    let w0 = rows.iter().map(String::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols.len())
        .map(|j| {
            cells
                .iter()
                .map(|r| r[j].len())
                .chain([cols[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = format!("{:w0$}", "");
    for (c, w) in cols.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (r, row) in rows.iter().zip(&cells) {
        let _ = write!(out, "{r:w0$}");
        for (c, w) in row.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Encodes both episodes' achievements with the network and matches them.
pub fn match_demo(
    net: &AgentNet,
    params: &ParamStore,
    a: &Trajectory,
    b: &Trajectory,
    ot: &OtConfig,
) -> Result<MatchDemo> {
    let g = Graph::new();
    let enc = encode_batch(&g, net, params, &[a, b], false)?;
    let ach = enc.achievements.value();
    let rows = |r: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        r.map(|i| ach.row_slice(i).iter().map(|&x| x as f64).collect())
            .collect()
    };
    let cost = CostMatrix::cosine_costs(&rows(enc.spans[0].1.clone()), &rows(enc.spans[1].1.clone()));
    let solution = solve_partial_ot(&cost, ot);
    let matching = threshold_match(&solution.plan);
    let ids = |t: &Trajectory| t.achievement_ids();
    Ok(MatchDemo {
        labels_a: ids(a),
        labels_b: ids(b),
        cost,
        solution,
        matching,
    })
}

//! Success rates, the geometric-mean score and the metrics CSV.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::distill::AuxStats;
use crate::error::{Error, Result};
use crate::ppo::UpdateStats;
use crate::trajectory::Trajectory;

pub const METRICS_VERSION: &str = "achdist-metrics-v1";

/// `exp(mean(ln(1 + s_i))) - 1` over success rates in percent.
pub fn score(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Config("score needs at least one success rate".into()));
    }
    if let Some(&r) = rates.iter().find(|r| !(0.0..=100.0).contains(*r)) {
        return Err(Error::RateOutOfRange(r));
    }
    let mean = rates.iter().map(|s| s.ln_1p()).sum::<f64>() / rates.len() as f64;
    Ok(mean.exp_m1())
}

/// Bitmask of the achievements an episode unlocked.
fn unlock_mask(t: &Trajectory) -> u64 {
    t.achievement_ids().into_iter().fold(0, |m, id| m | 1 << id)
}

/// Per-achievement success over all completed episodes and over a
/// trailing window of environment steps.
#[derive(Clone, Debug)]
pub struct SuccessTracker {
    num_achievements: usize,
    episodes: u64,
    counts: Vec<u64>,
    window_steps: u64,
    /// `(env step at which the episode ended, unlock mask, return)`.
    recent: VecDeque<(u64, u64, f64)>,
}

impl SuccessTracker {
    pub fn new(num_achievements: usize, window_steps: u64) -> Self {
        Self {
            num_achievements,
            episodes: 0,
            counts: vec![0; num_achievements],
            window_steps,
            recent: VecDeque::new(),
        }
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Records an episode that ended by env step `end_step`.
    pub fn add(&mut self, end_step: u64, t: &Trajectory) {
        let mask = unlock_mask(t);
        self.episodes += 1;
        for (i, c) in self.counts.iter_mut().enumerate() {
            *c += mask >> i & 1;
        }
        self.recent.push_back((end_step, mask, t.total_reward()));
    }

    /// Drops window entries older than `now - window_steps`.
    pub fn advance(&mut self, now: u64) {
        while self.recent.front().is_some_and(|e| e.0 + self.window_steps <= now) {
            self.recent.pop_front();
        }
    }

    /// Percent of all episodes that unlocked each achievement; `None`
    /// before the first episode completes.
    pub fn rates(&self) -> Option<Vec<f64>> {
        (self.episodes > 0).then(|| {
            self.counts
                .iter()
                .map(|&c| 100.0 * c as f64 / self.episodes as f64)
                .collect()
        })
    }

    pub fn window_rates(&self) -> Option<Vec<f64>> {
        let n = self.recent.len();
        (n > 0).then(|| {
            (0..self.num_achievements)
                .map(|i| 100.0 * self.recent.iter().filter(|e| e.1 >> i & 1 == 1).count() as f64 / n as f64)
                .collect()
        })
    }

    pub fn window_reward(&self) -> Option<f64> {
        let n = self.recent.len();
        (n > 0).then(|| self.recent.iter().map(|e| e.2).sum::<f64>() / n as f64)
    }
}

/// One row per rollout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub env_steps: u64,
    pub outer_phase: u64,
    /// Rollouts collected since the last buffer reset, including this one.
    pub policy_phase: u64,
    pub episodes: u64,
    pub score: f64,
    pub window_score: f64,
    pub window_reward: f64,
    /// Percent, all episodes so far.
    pub success: Vec<f64>,
    pub ppo: UpdateStats,
    pub aux_phases: u64,
    pub aux: AuxStats,
}

fn header(names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "update",
        "env_steps",
        "outer_phase",
        "policy_phase",
        "episodes",
        "score",
        "window_score",
        "window_reward",
    ]
    .map(String::from)
    .to_vec();
    h.extend(names.iter().map(|n| format!("success_{n}")));
    h.extend(
        [
            "policy_loss",
            "value_loss",
            "entropy",
            "clip_fraction",
            "approx_kl",
            "explained_variance",
            "grad_norm",
            "aux_phases",
            "aux_epochs",
            "aux_steps",
            "pred_loss",
            "match_loss",
            "policy_reg",
            "value_reg",
            "matched_pairs",
            "ot_max_residual",
            "ot_unconverged",
        ]
        .map(String::from),
    );
    h
}

/// Append-only CSV with a version comment on the first line.
pub struct MetricsWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut inner: W, achievement_names: &[String]) -> Result<Self> {
        writeln!(inner, "# {METRICS_VERSION}")?;
        let mut out = csv::Writer::from_writer(inner);
        out.write_record(header(achievement_names))?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &MetricsRow) -> Result<()> {
        let mut rec: Vec<String> = vec![
            r.update.to_string(),
            r.env_steps.to_string(),
            r.outer_phase.to_string(),
            r.policy_phase.to_string(),
            r.episodes.to_string(),
            r.score.to_string(),
            r.window_score.to_string(),
            r.window_reward.to_string(),
        ];
        rec.extend(r.success.iter().map(f64::to_string));
        let p = &r.ppo;
        let a = &r.aux;
        rec.extend(
            [
                p.policy_loss,
                p.value_loss,
                p.entropy,
                p.clip_fraction,
                p.approx_kl,
                p.explained_variance,
                p.grad_norm,
            ]
            .map(|x| x.to_string()),
        );
        rec.extend([r.aux_phases, a.epochs as u64, a.optimizer_steps as u64].map(|x| x.to_string()));
        rec.extend([a.pred_loss, a.match_loss, a.policy_reg, a.value_reg].map(|x| x.to_string()));
        rec.push(a.matched_pairs.to_string());
        rec.push(a.ot_max_residual.to_string());
        rec.push(a.ot_unconverged.to_string());
        self.out.write_record(rec)?;
        self.out.flush()?;
        Ok(())
    }
}

/// A metrics file read back as named columns.
#[derive(Clone, Debug, Default)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or_default();
        if first.trim_start_matches('#').trim() != METRICS_VERSION {
            return Err(Error::Config(format!(
                "{}: not a {METRICS_VERSION} file",
                path.display()
            )));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let columns = rdr.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad metrics field {f:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Achievement names, in column order.
    pub fn achievements(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter_map(|c| c.strip_prefix("success_").map(String::from))
            .collect()
    }
}

//! Episode recordings as JSON.
//!
//! ```json
//! { "env_id": "keychain", "seed": 3,
//!   "graph": { "names": [...], "edges": [[0, 1], ...] },
//!   "initial_observation": [...] | null,
//!   "steps": [ { "action": 4, "reward": 1.0, "unlocked": 0, "observation": [...] | null }, ... ] }
//! ```
//! `unlocked` is `-1` when the step completed nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AchievementEnv, AchievementGraph, AchievementId, Observation};
use crate::error::Result;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedStep {
    pub action: usize,
    pub reward: f64,
    pub unlocked: i64,
    #[serde(default)]
    pub observation: Option<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub env_id: String,
    pub seed: u64,
    pub graph: AchievementGraph,
    #[serde(default)]
    pub initial_observation: Option<Observation>,
    pub steps: Vec<RecordedStep>,
}

impl Recording {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    pub fn unlocked_ids(&self) -> Vec<Option<AchievementId>> {
        self.steps
            .iter()
            .map(|s| (s.unlocked >= 0).then_some(s.unlocked as AchievementId))
            .collect()
    }

    /// Observations `s_0 .. s_T`, when all were recorded.
    pub fn observations(&self) -> Option<Vec<Observation>> {
        let mut out = vec![self.initial_observation.clone()?];
        for s in &self.steps {
            out.push(s.observation.clone()?);
        }
        Some(out)
    }

    /// The episode as a trajectory; `None` without recorded observations.
    pub fn to_trajectory(&self) -> Option<Trajectory> {
        let obs = self.observations()?;
        let mut t = Trajectory::starting_at(obs[0].clone());
        for ((s, id), o) in self.steps.iter().zip(self.unlocked_ids()).zip(obs.into_iter().skip(1)) {
            t.push(s.action, s.reward, id, o);
        }
        Some(t)
    }
}

/// Runs one episode from `seed`, choosing actions with `policy`, which sees
/// the current observation and the step index.
pub fn record_episode<E: AchievementEnv + ?Sized>(
    env: &mut E,
    seed: u64,
    with_observations: bool,
    mut policy: impl FnMut(&Observation, usize) -> usize,
) -> Result<Recording> {
    let mut obs = env.reset(seed);
    let initial_observation = with_observations.then(|| obs.clone());
    let mut steps = Vec::new();
    while !env.is_done() {
        let action = policy(&obs, steps.len());
        let r = env.step(action)?;
        obs = r.observation;
        steps.push(RecordedStep {
            action,
            reward: r.reward,
            unlocked: r.unlocked.map_or(-1, |id| id as i64),
            observation: with_observations.then(|| obs.clone()),
        });
    }
    Ok(Recording {
        env_id: env.id(),
        seed,
        graph: env.graph().clone(),
        initial_observation,
        steps,
    })
}

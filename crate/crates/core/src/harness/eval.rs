//! Evaluating a saved checkpoint with the sampled policy.

use ndauto::ParamStore;
use serde::Serialize;

use super::metrics::{score, SuccessTracker};
use super::probe::policy_episodes;
use super::RunConfig;
use crate::error::Result;
use crate::net::AgentNet;

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub episodes: u64,
    pub achievements: Vec<String>,
    /// Percent of episodes that unlocked each achievement.
    pub success: Vec<f64>,
    pub score: f64,
    pub mean_reward: f64,
}

pub fn evaluate(
    cfg: &RunConfig,
    net: &AgentNet,
    params: &ParamStore,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let envs = (0..cfg.ppo.num_envs)
        .map(|_| cfg.env.build())
        .collect::<Result<Vec<_>>>()?;
    let names = envs[0].graph().names.clone();
    let trajs = policy_episodes(envs, net, params, cfg.aux_terms().memory, episodes, seed)?;
    let mut tracker = SuccessTracker::new(names.len(), u64::MAX / 2);
    for t in &trajs {
        tracker.add(0, t);
    }
    let success = tracker.rates().unwrap_or_else(|| vec![0.0; names.len()]);
    Ok(EvalReport {
        episodes: tracker.episodes(),
        score: score(&success)?,
        mean_reward: tracker.window_reward().unwrap_or(0.0),
        achievements: names,
        success,
    })
}

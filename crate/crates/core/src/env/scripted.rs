//! Fixed-schedule environment for testing the distillation machinery.
//!
//! Actions are ignored. The observation is `[t / len, one-hot(last unlock
//! or none), noise...]`, where the first two blocks are scaled by
//! `signal_scale` and the noise is seeded per episode.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{complete, AchievementEnv, AchievementGraph, AchievementId, Observation, StepResult, UnlockState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedConfig {
    /// `(timestep, achievement)` pairs with strictly increasing timesteps.
    pub schedule: Vec<(usize, AchievementId)>,
    pub num_achievements: usize,
    pub episode_len: usize,
    pub num_actions: usize,
    pub noise_dims: usize,
    pub noise_scale: f32,
    pub signal_scale: f32,
    /// Redraw the timesteps on every reset, keeping the achievement order.
    pub jitter_timings: bool,
    /// Chain the scheduled achievements in order in the graph.
    pub chain_graph: bool,
    /// Draw the noise once per episode instead of every step.
    pub episode_noise: bool,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(3, 0), (7, 1)],
            num_achievements: 2,
            episode_len: 10,
            num_actions: 5,
            noise_dims: 0,
            noise_scale: 1.0,
            signal_scale: 1.0,
            jitter_timings: false,
            chain_graph: false,
            episode_noise: false,
        }
    }
}

impl ScriptedConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.schedule.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::NonMonotoneSchedule { index: i + 1 });
            }
        }
        if let Some(&(_, id)) = self.schedule.iter().find(|e| e.1 >= self.num_achievements) {
            return Err(Error::UnknownAchievement {
                id,
                count: self.num_achievements,
            });
        }
        if self.episode_len == 0 || self.num_actions == 0 {
            return Err(Error::Config(
                "scripted episode_len and num_actions must be positive".into(),
            ));
        }
        if self.jitter_timings && self.schedule.len() > self.episode_len {
            return Err(Error::Config("schedule longer than the episode".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScriptedEnv {
    config: ScriptedConfig,
    graph: AchievementGraph,
    schedule: Vec<(usize, AchievementId)>,
    rng: ChaCha8Rng,
    t: usize,
    last: Option<AchievementId>,
    unlocked: UnlockState,
    done: bool,
    noise: Vec<f32>,
}

impl ScriptedEnv {
    pub fn new(config: ScriptedConfig) -> Result<Self> {
        config.validate()?;
        let mut graph = AchievementGraph::unordered(config.num_achievements);
        if config.chain_graph {
            let mut edges: Vec<_> = config.schedule.windows(2).map(|w| (w[0].1, w[1].1)).collect();
            edges.dedup();
            graph = AchievementGraph::new(graph.names, edges)?;
        }
        Ok(Self {
            schedule: config.schedule.clone(),
            graph,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            last: None,
            unlocked: UnlockState::default(),
            done: false,
            noise: Vec::new(),
            config,
        })
    }

    /// Convenience constructor: fixed schedule, `episode_len` steps, ids
    /// numbered up to the largest scheduled one.
    pub fn from_schedule(schedule: Vec<(usize, AchievementId)>, episode_len: usize) -> Result<Self> {
        let num_achievements = schedule.iter().map(|e| e.1 + 1).max().unwrap_or(1);
        Self::new(ScriptedConfig {
            schedule,
            num_achievements,
            episode_len,
            ..Default::default()
        })
    }

    /// Schedule in effect for the current episode.
    pub fn schedule(&self) -> &[(usize, AchievementId)] {
        &self.schedule
    }

    fn observe(&mut self) -> Observation {
        let c = &self.config;
        let mut obs = vec![0.0f32; 1 + c.num_achievements + 1 + c.noise_dims];
        obs[0] = c.signal_scale * self.t as f32 / c.episode_len as f32;
        let slot = self.last.map_or(0, |id| id + 1);
        obs[1 + slot] = c.signal_scale;
        let base = 2 + c.num_achievements;
        if !c.episode_noise || self.noise.is_empty() {
            self.noise = (0..c.noise_dims)
                .map(|_| c.noise_scale * self.rng.sample::<f32, _>(StandardNormal))
                .collect();
        }
        obs[base..].copy_from_slice(&self.noise);
        obs
    }
}

impl AchievementEnv for ScriptedEnv {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn graph(&self) -> &AchievementGraph {
        &self.graph
    }

    fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    fn observation_shape(&self) -> (usize, usize, usize) {
        (2 + self.config.num_achievements + self.config.noise_dims, 1, 1)
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        if self.config.jitter_timings {
            let mut times = sample(&mut self.rng, self.config.episode_len, self.config.schedule.len()).into_vec();
            times.sort_unstable();
            self.schedule = times
                .into_iter()
                .zip(self.config.schedule.iter().map(|e| e.1))
                .collect();
        }
        self.t = 0;
        self.last = None;
        self.unlocked = UnlockState::default();
        self.done = false;
        self.noise.clear();
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= self.config.num_actions {
            return Err(Error::InvalidAction {
                action,
                num_actions: self.config.num_actions,
            });
        }
        let unlocked = self.schedule.iter().find(|e| e.0 == self.t).map(|e| e.1);
        let reward = unlocked.map_or(0.0, |id| complete(&mut self.unlocked, id));
        if unlocked.is_some() {
            self.last = unlocked;
        }
        self.t += 1;
        self.done = self.t >= self.config.episode_len;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            unlocked,
        })
    }

    fn unlocked(&self) -> UnlockState {
        self.unlocked
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

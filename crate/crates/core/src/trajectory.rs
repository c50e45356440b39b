//! Completed episodes as the distillation buffer stores them.

use crate::env::{AchievementId, Observation};

/// One episode: `observations[t]` is the state before `actions[t]`, and the
/// final entry is the state the episode ended in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Achievement completed by each transition, first time or not.
    pub unlocked: Vec<Option<AchievementId>>,
}

impl Trajectory {
    pub fn starting_at(obs: Observation) -> Self {
        Self {
            observations: vec![obs],
            ..Default::default()
        }
    }

    pub fn push(&mut self, action: usize, reward: f64, unlocked: Option<AchievementId>, next: Observation) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.unlocked.push(unlocked);
        self.observations.push(next);
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Steps whose transition paid a reward, i.e. first-time unlocks.
    pub fn achievement_steps(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.rewards[t] > 0.0).collect()
    }

    /// Achievement ids of [`Self::achievement_steps`], in order.
    pub fn achievement_ids(&self) -> Vec<AchievementId> {
        self.achievement_steps()
            .into_iter()
            .filter_map(|t| self.unlocked[t])
            .collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

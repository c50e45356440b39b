//! One-step bandit: a single state, and one action pays the only reward.

use super::{complete, AchievementEnv, AchievementGraph, Observation, StepResult, UnlockState};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BanditEnv {
    graph: AchievementGraph,
    num_actions: usize,
    best: usize,
    unlocked: UnlockState,
    done: bool,
}

impl BanditEnv {
    /// `num_actions` arms, of which `best` unlocks the single achievement.
    pub fn new(num_actions: usize, best: usize) -> Result<Self> {
        if best >= num_actions {
            return Err(Error::InvalidAction {
                action: best,
                num_actions,
            });
        }
        Ok(Self {
            graph: AchievementGraph::new(vec!["pull_best_arm".into()], vec![])?,
            num_actions,
            best,
            unlocked: UnlockState::default(),
            done: false,
        })
    }

    fn observation() -> Observation {
        vec![1.0, 0.0, 0.5, -1.0]
    }
}

impl AchievementEnv for BanditEnv {
    fn id(&self) -> String {
        "bandit".into()
    }

    fn graph(&self) -> &AchievementGraph {
        &self.graph
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn observation_shape(&self) -> (usize, usize, usize) {
        (4, 1, 1)
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.unlocked = UnlockState::default();
        self.done = false;
        Self::observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= self.num_actions {
            return Err(Error::InvalidAction {
                action,
                num_actions: self.num_actions,
            });
        }
        let unlocked = (action == self.best).then_some(0);
        let reward = unlocked.map_or(0.0, |id| complete(&mut self.unlocked, id));
        self.done = true;
        Ok(StepResult {
            observation: Self::observation(),
            reward,
            done: true,
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

//! Achievement environments: every first-time unlock pays reward 1.

mod bandit;
mod keychain;
mod recording;
mod scripted;
mod vec_env;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bandit::BanditEnv;
pub use keychain::{Cell, Color, KeychainConfig, KeychainEnv, Layout, Variant, ACTIONS, CROP};
pub use recording::{record_episode, RecordedStep, Recording};
pub use scripted::{ScriptedConfig, ScriptedEnv};
pub use vec_env::{splitmix64, SeedStream, VecEnv};

pub type AchievementId = usize;

/// Flattened observation; layout is fixed per environment.
pub type Observation = Vec<f32>;

/// Prerequisite structure over achievements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AchievementGraph {
    pub names: Vec<String>,
    /// `(prerequisite, dependent)` pairs.
    pub edges: Vec<(AchievementId, AchievementId)>,
}

impl AchievementGraph {
    pub fn new(names: Vec<String>, edges: Vec<(AchievementId, AchievementId)>) -> Result<Self> {
        let n = names.len();
        if n > 64 {
            return Err(Error::Graph(format!("{n} achievements exceed the 64-bit unlock mask")));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Graph(format!("edge ({a}, {b}) with {n} vertices")));
        }
        let g = Self { names, edges };
        if g.topological_order().is_none() {
            return Err(Error::Graph("cycle".into()));
        }
        Ok(g)
    }

    /// Achievements with no prerequisites among each other.
    pub fn unordered(count: usize) -> Self {
        Self {
            names: (0..count).map(|i| format!("achievement_{i}")).collect(),
            edges: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn parents(&self, v: AchievementId) -> impl Iterator<Item = AchievementId> + '_ {
        self.edges.iter().filter(move |e| e.1 == v).map(|e| e.0)
    }

    /// Kahn's algorithm; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<AchievementId>> {
        let n = self.len();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut ready: Vec<_> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &(a, b) in &self.edges {
                if a == v {
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        ready.push(b);
                    }
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Bitmask of all transitive prerequisites of `v`.
    pub fn ancestors(&self, v: AchievementId) -> u64 {
        let mut mask = 0u64;
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for p in self.parents(x) {
                if mask & (1 << p) == 0 {
                    mask |= 1 << p;
                    stack.push(p);
                }
            }
        }
        mask
    }
}

/// Which achievements have been unlocked this episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct UnlockState(pub u64);

impl UnlockState {
    pub fn contains(self, id: AchievementId) -> bool {
        self.0 >> id & 1 == 1
    }

    /// Sets the bit; returns whether it was newly set.
    pub fn insert(&mut self, id: AchievementId) -> bool {
        let fresh = !self.contains(id);
        self.0 |= 1 << id;
        fresh
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// The achievement this transition completed, first time or not.
    pub unlocked: Option<AchievementId>,
}

pub trait AchievementEnv: Send {
    /// Short identifier written into recordings.
    fn id(&self) -> String;
    fn graph(&self) -> &AchievementGraph;
    fn num_actions(&self) -> usize;
    /// `(channels, height, width)`; flat vectors use `(len, 1, 1)`.
    fn observation_shape(&self) -> (usize, usize, usize);
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn unlocked(&self) -> UnlockState;
    fn is_done(&self) -> bool;

    fn observation_len(&self) -> usize {
        let (c, h, w) = self.observation_shape();
        c * h * w
    }
}

impl AchievementEnv for Box<dyn AchievementEnv> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn graph(&self) -> &AchievementGraph {
        (**self).graph()
    }
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }
    fn observation_shape(&self) -> (usize, usize, usize) {
        (**self).observation_shape()
    }
    fn reset(&mut self, seed: u64) -> Observation {
        (**self).reset(seed)
    }
    fn step(&mut self, action: usize) -> Result<StepResult> {
        (**self).step(action)
    }
    fn unlocked(&self) -> UnlockState {
        (**self).unlocked()
    }
    fn is_done(&self) -> bool {
        (**self).is_done()
    }
}

/// Shared bookkeeping: record a completion and return its reward.
pub(crate) fn complete(state: &mut UnlockState, id: AchievementId) -> f64 {
    if state.insert(id) {
        1.0
    } else {
        0.0
    }
}

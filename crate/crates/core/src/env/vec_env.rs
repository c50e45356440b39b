use super::{AchievementEnv, Observation, StepResult};
use crate::error::{Error, Result};

/// The splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Reset seeds as a pure function of `(base, env index, episode count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    pub base: u64,
}

impl SeedStream {
    pub fn seed(&self, env: usize, episode: u64) -> u64 {
        splitmix64(splitmix64(self.base) ^ splitmix64(((env as u64) << 40) ^ episode))
    }
}

/// A batch of environments that reset themselves when an episode ends.
pub struct VecEnv<E = Box<dyn AchievementEnv>> {
    envs: Vec<E>,
    obs: Vec<Observation>,
    episodes: Vec<u64>,
    stream: SeedStream,
}

impl<E: AchievementEnv> VecEnv<E> {
    pub fn new(mut envs: Vec<E>, base_seed: u64) -> Self {
        let stream = SeedStream { base: base_seed };
        let obs = envs
            .iter_mut()
            .enumerate()
            .map(|(i, e)| e.reset(stream.seed(i, 0)))
            .collect();
        Self {
            episodes: vec![0; envs.len()],
            envs,
            obs,
            stream,
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn env(&self, i: usize) -> &E {
        &self.envs[i]
    }

    /// Observation each environment will act on next.
    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn seed_stream(&self) -> SeedStream {
        self.stream
    }

    /// Seed of the episode environment `i` is currently running.
    pub fn episode_seed(&self, i: usize) -> u64 {
        self.stream.seed(i, self.episodes[i])
    }

    /// Steps every environment once. A result with `done` carries the
    /// terminal observation; the environment has already been reset and
    /// [`observations`](Self::observations) holds the fresh start.
    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<StepResult>> {
        if actions.len() != self.envs.len() {
            return Err(Error::BatchSize {
                expected: self.envs.len(),
                got: actions.len(),
            });
        }
        let mut out = Vec::with_capacity(actions.len());
        for (i, (env, &a)) in self.envs.iter_mut().zip(actions).enumerate() {
            let r = env.step(a)?;
            self.obs[i] = if r.done {
                self.episodes[i] += 1;
                env.reset(self.stream.seed(i, self.episodes[i]))
            } else {
                r.observation.clone()
            };
            out.push(r);
        }
        Ok(out)
    }
}

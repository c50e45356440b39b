//! Rollout collection, advantage estimation, value-target normalization and
//! the clipped-surrogate update.

use ndauto::{adam_step, AdamState, Graph, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{AchievementEnv, VecEnv};
use crate::error::{Error, Result};
use crate::net::{observation_batch, unit_difference, AgentNet};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Environment steps per rollout, summed over the parallel envs.
    pub rollout_len: usize,
    pub num_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub value_coef: f64,
    pub ewma_decay: f64,
    /// Standardize advantages per rollout before the policy loss.
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            gae_lambda: 0.65,
            rollout_len: 4096,
            num_envs: 8,
            epochs: 3,
            minibatches: 8,
            entropy_coef: 0.01,
            clip: 0.2,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            value_coef: 0.5,
            ewma_decay: 0.99,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let checks = [
            (unit(self.gamma), "gamma must lie in [0, 1]"),
            (unit(self.gae_lambda), "gae_lambda must lie in [0, 1]"),
            (unit(self.ewma_decay), "ewma_decay must lie in [0, 1]"),
            (self.num_envs > 0, "num_envs must be positive"),
            (
                self.rollout_len > 0 && self.rollout_len.is_multiple_of(self.num_envs),
                "rollout_len must be a positive multiple of num_envs",
            ),
            (
                self.minibatches > 0 && self.minibatches <= self.rollout_len,
                "minibatches must lie in 1..=rollout_len",
            ),
            (
                self.clip > 0.0 && self.learning_rate > 0.0,
                "clip and learning_rate must be positive",
            ),
            (self.max_grad_norm > 0.0, "max_grad_norm must be positive"),
            (
                self.entropy_coef >= 0.0 && self.value_coef >= 0.0,
                "loss coefficients must be nonnegative",
            ),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn steps_per_env(&self) -> usize {
        self.rollout_len / self.num_envs
    }
}

/// Generalized advantage estimates and value targets for one env's steps.
///
/// `values` are in return space; `bootstrap` is the value of the state after
/// the last step (ignored when that step is terminal).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae input lengths differ");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_value = values[t];
        next_adv = adv[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Exponentially weighted mean and second moment of value targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    pub decay: f64,
    pub mean: f64,
    pub mean_sq: f64,
    pub initialized: bool,
}

impl ValueNormalizer {
    /// Floor on the variance; keeps early, near-constant targets from
    /// blowing up the normalized scale.
    pub const VAR_FLOOR: f64 = 1e-2;

    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            mean: 0.0,
            mean_sq: 1.0,
            initialized: false,
        }
    }

    pub fn update(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let m = targets.iter().sum::<f64>() / n;
        let sq = targets.iter().map(|x| x * x).sum::<f64>() / n;
        if self.initialized {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * m;
            self.mean_sq = self.decay * self.mean_sq + (1.0 - self.decay) * sq;
        } else {
            self.mean = m;
            self.mean_sq = sq;
            self.initialized = true;
        }
    }

    pub fn std(&self) -> f64 {
        (self.mean_sq - self.mean * self.mean).max(Self::VAR_FLOOR).sqrt()
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std() + self.mean
    }
}

/// One rollout, time-major: entry `t * num_envs + e` is env `e` at step `t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub obs_len: usize,
    pub latent: usize,
    pub observations: Vec<f32>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimates at collection time, in return space.
    pub values: Vec<f64>,
    pub memory: Vec<Real>,
    /// Values of the states following the last step of each env.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f32] {
        &self.observations[i * self.obs_len..(i + 1) * self.obs_len]
    }

    pub fn memory_row(&self, i: usize) -> &[Real] {
        &self.memory[i * self.latent..(i + 1) * self.latent]
    }

    /// Fills `advantages` and `targets`, running GAE per env.
    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        let (n, k) = (self.len(), self.num_envs);
        self.advantages = vec![0.0; n];
        self.targets = vec![0.0; n];
        for e in 0..k {
            let idx: Vec<usize> = (e..n).step_by(k).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let dones: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, tgt) = compute_gae(
                &pick(&self.rewards),
                &pick(&self.values),
                &dones,
                self.bootstrap[e],
                gamma,
                lambda,
            );
            for (j, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[j];
                self.targets[i] = tgt[j];
            }
        }
    }

    /// `1 - Var(target - value) / Var(target)`.
    pub fn explained_variance(&self) -> f64 {
        let var = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len().max(1) as f64
        };
        let resid: Vec<f64> = self.targets.iter().zip(&self.values).map(|(t, v)| t - v).collect();
        let vt = var(&self.targets);
        if vt == 0.0 {
            0.0
        } else {
            1.0 - var(&resid) / vt
        }
    }
}

/// Steps a batch of environments with the current policy, carrying episode
/// fragments and memory vectors across rollouts.
pub struct Collector<E = Box<dyn AchievementEnv>> {
    envs: VecEnv<E>,
    memory: Vec<Vec<Real>>,
    /// Latent of the state an achievement was unlocked from, waiting for the
    /// latent of the state after it.
    pending: Vec<Option<Vec<Real>>>,
    fragments: Vec<Trajectory>,
    use_memory: bool,
}

impl<E: AchievementEnv> Collector<E> {
    /// With `use_memory` false the memory input stays at the zero sentinel.
    pub fn new(envs: VecEnv<E>, latent: usize, use_memory: bool) -> Self {
        let k = envs.len();
        let fragments = envs
            .observations()
            .iter()
            .map(|o| Trajectory::starting_at(o.clone()))
            .collect();
        Self {
            envs,
            memory: vec![vec![0.0; latent]; k],
            pending: vec![None; k],
            fragments,
            use_memory,
        }
    }

    pub fn envs(&self) -> &VecEnv<E> {
        &self.envs
    }

    /// Encodes the current observations, resolves pending memory updates and
    /// evaluates the heads.
    fn evaluate<'g>(
        &mut self,
        g: &'g Graph,
        net: &AgentNet,
        params: &ParamStore,
    ) -> Result<(Tensor, Tensor, ndauto::Categorical<'g>, Var<'g>)> {
        let obs = observation_batch(self.envs.observations().iter().map(|o| o.as_slice()));
        let z = net.encode(g, params, g.constant(obs.clone()))?;
        {
            let zv = z.value();
            for (e, p) in self.pending.iter_mut().enumerate() {
                if let Some(before) = p.take() {
                    self.memory[e] = unit_difference(&before, zv.row_slice(e));
                }
            }
        }
        let mem = Tensor::stack_rows(self.memory.iter().map(|m| m.as_slice()))?;
        let out = net.heads(g, params, z, g.constant(mem))?;
        Ok((obs, z.to_tensor(), out.dist, out.value))
    }

    /// Collects `steps_per_env` steps from every env. Returns the batch with
    /// advantages still unset, plus the episodes completed along the way.
    pub fn collect(
        &mut self,
        net: &AgentNet,
        params: &ParamStore,
        normalizer: &ValueNormalizer,
        steps_per_env: usize,
        rng: &mut impl Rng,
    ) -> Result<(RolloutBatch, Vec<Trajectory>)> {
        let k = self.envs.len();
        let latent = net.latent_size();
        let mut batch = RolloutBatch {
            num_envs: k,
            obs_len: net.obs_len(),
            latent,
            ..Default::default()
        };
        let mut finished = Vec::new();
        for _ in 0..steps_per_env {
            let g = Graph::new();
            let (obs, latents, dist, value) = self.evaluate(&g, net, params)?;
            let actions = dist.sample(rng);
            let lp = dist.log_prob(&actions)?.to_tensor();
            let values = value.to_tensor();
            batch.observations.extend(obs.data().iter().map(|&x| x as f32));
            for m in &self.memory {
                batch.memory.extend_from_slice(m);
            }
            let results = self.envs.step(&actions)?;
            for (e, r) in results.into_iter().enumerate() {
                batch.actions.push(actions[e]);
                batch.log_probs.push(lp.data()[e] as f64);
                batch.values.push(normalizer.denormalize(values.data()[e] as f64));
                batch.rewards.push(r.reward);
                batch.dones.push(r.done);
                if r.reward > 0.0 && self.use_memory {
                    self.pending[e] = Some(latents.row_slice(e).to_vec());
                }
                self.fragments[e].push(actions[e], r.reward, r.unlocked, r.observation);
                if r.done {
                    self.memory[e].iter_mut().for_each(|x| *x = 0.0);
                    self.pending[e] = None;
                    let next = Trajectory::starting_at(self.envs.observations()[e].clone());
                    finished.push(std::mem::replace(&mut self.fragments[e], next));
                }
            }
        }
        let g = Graph::new();
        let (_, _, _, value) = self.evaluate(&g, net, params)?;
        batch.bootstrap = value
            .value()
            .data()
            .iter()
            .map(|&v| normalizer.denormalize(v as f64))
            .collect();
        Ok((batch, finished))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub explained_variance: f64,
}

/// Per-sample inputs of the PPO loss.
pub struct LossInputs<'a> {
    pub observations: Tensor,
    pub memory: Tensor,
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    /// Value targets in normalized space.
    pub targets: &'a [f64],
}

/// Loss terms of one minibatch, each a scalar.
pub struct LossParts<'g> {
    pub total: Var<'g>,
    pub policy: Var<'g>,
    pub value: Var<'g>,
    pub entropy: Var<'g>,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

fn column(v: &[f64]) -> Tensor {
    Tensor::from_rows(v.len(), 1, v.iter().map(|&x| x as Real).collect())
}

/// `-J_clip + c_v * 0.5 * (V - target)^2 - c_e * entropy`, averaged.
pub fn ppo_loss<'g>(
    g: &'g Graph,
    net: &AgentNet,
    params: &ParamStore,
    x: &LossInputs,
    cfg: &PpoConfig,
) -> Result<LossParts<'g>> {
    let z = net.encode(g, params, g.constant(x.observations.clone()))?;
    let out = net.heads(g, params, z, g.constant(x.memory.clone()))?;
    let lp = out.dist.log_prob(x.actions)?;
    let log_ratio = lp.sub(g.constant(column(x.old_log_probs)))?;
    let ratio = log_ratio.exp();
    let adv = g.constant(column(x.advantages));
    let clip = cfg.clip as Real;
    let surrogate = ratio.mul(adv)?.minimum(ratio.clamp(1.0 - clip, 1.0 + clip).mul(adv)?)?;
    let policy = surrogate.mean().neg();
    let value = out.value.sub(g.constant(column(x.targets)))?.square().mean().scale(0.5);
    let entropy = out.dist.entropy().mean();
    let total = policy
        .add(value.scale(cfg.value_coef as Real))?
        .sub(entropy.scale(cfg.entropy_coef as Real))?;
    let (clip_fraction, approx_kl) = {
        let lr = log_ratio.value();
        let n = lr.len().max(1) as f64;
        let clipped = lr
            .data()
            .iter()
            .filter(|&&l| ((l as f64).exp() - 1.0).abs() > cfg.clip)
            .count();
        // Low-variance estimator of KL(old || new).
        let kl = lr
            .data()
            .iter()
            .map(|&l| (l as f64).exp() - 1.0 - l as f64)
            .sum::<f64>();
        (clipped as f64 / n, kl / n)
    };
    Ok(LossParts {
        total,
        policy,
        value,
        entropy,
        clip_fraction,
        approx_kl,
    })
}

/// Runs `epochs` passes of shuffled minibatch Adam steps over a finished
/// batch. Updates the normalizer with the batch targets first.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    net: &AgentNet,
    params: &mut ParamStore,
    adam: &mut AdamState,
    normalizer: &mut ValueNormalizer,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    normalizer.update(&batch.targets);
    let targets: Vec<f64> = batch.targets.iter().map(|&t| normalizer.normalize(t)).collect();
    let mut adv = batch.advantages.clone();
    if cfg.normalize_advantages && adv.len() > 1 {
        let m = adv.iter().sum::<f64>() / adv.len() as f64;
        let s = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - m) / (s + 1e-8));
    }
    let n = batch.len();
    let mb = n.div_ceil(cfg.minibatches);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats {
        explained_variance: batch.explained_variance(),
        ..Default::default()
    };
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
            let (old, a, t) = (pick(&batch.log_probs), pick(&adv), pick(&targets));
            let inputs = LossInputs {
                observations: observation_batch(idx.iter().map(|&i| batch.observation(i))),
                memory: Tensor::stack_rows(idx.iter().map(|&i| batch.memory_row(i)))?,
                actions: &actions,
                old_log_probs: &old,
                advantages: &a,
                targets: &t,
            };
            let g = Graph::new();
            let parts = ppo_loss(&g, net, params, &inputs, cfg)?;
            let total = parts.total.item() as f64;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    what: format!(
                        "ppo loss (policy {}, value {}, entropy {})",
                        parts.policy.item(),
                        parts.value.item(),
                        parts.entropy.item()
                    ),
                });
            }
            let grads = g.backward(parts.total)?.for_store(params);
            let step = adam_step(params, grads, adam, Some(cfg.max_grad_norm as Real))?;
            stats.policy_loss += parts.policy.item() as f64;
            stats.value_loss += parts.value.item() as f64;
            stats.entropy += parts.entropy.item() as f64;
            stats.clip_fraction += parts.clip_fraction;
            stats.approx_kl += parts.approx_kl;
            stats.grad_norm += step.grad_norm as f64;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.clip_fraction /= count;
        stats.approx_kl /= count;
        stats.grad_norm /= count;
    }
    Ok(stats)
}

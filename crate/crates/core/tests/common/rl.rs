//! Reinforcement-learning oracles and small training runs.

use achdist::env::{AchievementEnv, BanditEnv, VecEnv};
use achdist::net::{observation_batch, AgentNet, SizeProfile};
use achdist::ppo::{Collector, PpoConfig, ValueNormalizer};
use ndauto::{AdamConfig, AdamState, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct sum of discounted TD errors, cut at episode ends.
pub fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n { v[t + 1] } else { boot };
            r[t] + if d[t] { 0.0 } else { gamma * next } - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta[l];
                if d[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

/// Probability of the best arm after `updates` PPO iterations, or the
/// update count at which it first exceeded `target`.
pub fn bandit_run(seed: u64, updates: usize, target: f64) -> (Option<usize>, f64) {
    let cfg = PpoConfig {
        rollout_len: 64,
        num_envs: 8,
        minibatches: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let envs: Vec<BanditEnv> = (0..cfg.num_envs).map(|_| BanditEnv::new(2, 0).unwrap()).collect();
    let shape = envs[0].observation_shape();
    let (net, mut params) = AgentNet::new(SizeProfile::Tiny.config(), shape, 2, &mut rng).unwrap();
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let mut norm = ValueNormalizer::new(cfg.ewma_decay);
    let mut collector = Collector::new(VecEnv::new(envs, seed), net.latent_size(), true);
    let p_best = |params: &_| {
        let g = Graph::new();
        let obs = g.constant(observation_batch([collector_obs().as_slice()]));
        let z = net.encode(&g, params, obs).unwrap();
        let mem = g.constant(Tensor::zeros(&[1, net.latent_size()]));
        net.heads(&g, params, z, mem).unwrap().dist.probs().data()[0]
    };
    let mut first = None;
    for u in 0..updates {
        let (mut batch, _) = collector
            .collect(&net, &params, &norm, cfg.steps_per_env(), &mut rng)
            .unwrap();
        batch.finish(cfg.gamma, cfg.gae_lambda);
        achdist::ppo::ppo_update(&net, &mut params, &mut adam, &mut norm, &batch, &cfg, &mut rng).unwrap();
        if first.is_none() && p_best(&params) > target {
            first = Some(u + 1);
        }
    }
    (first, p_best(&params))
}

fn collector_obs() -> Vec<f32> {
    BanditEnv::new(2, 0).unwrap().reset(0)
}

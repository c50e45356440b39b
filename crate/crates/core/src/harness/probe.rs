//! Linear probe: how well a frozen encoder's latents predict the next
//! achievement.

use ndauto::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::index_achievements;
use crate::env::{AchievementEnv, KeychainConfig, KeychainEnv, SeedStream, VecEnv};
use crate::error::{Error, Result};
use crate::net::{observation_batch, AgentNet};
use crate::ppo::{Collector, ValueNormalizer};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train: usize,
    pub test: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train: 50_000,
            test: 10_000,
            epochs: 500,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Feature vectors with next-achievement labels.
#[derive(Clone, Debug, Default)]
pub struct ProbeData {
    pub features: Vec<Vec<Real>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub train_size: usize,
    pub test_size: usize,
    /// Fraction of test states whose top prediction is the true label.
    pub accuracy: f64,
    /// Probability given to the true label, per test state.
    pub confidences: Vec<f64>,
    pub median_confidence: f64,
}

/// Latent of every state that has a next achievement, labelled with that
/// achievement's id.
pub fn probe_dataset(net: &AgentNet, params: &ParamStore, trajs: &[Trajectory]) -> Result<ProbeData> {
    let mut data = ProbeData::default();
    for t in trajs {
        let idx = index_achievements(t);
        let ids: Vec<usize> = idx.steps.iter().map(|&s| t.unlocked[s].unwrap_or(0)).collect();
        let steps: Vec<usize> = (0..t.len()).filter(|&s| idx.next[s].is_some()).collect();
        if steps.is_empty() {
            continue;
        }
        let g = Graph::new();
        let obs = observation_batch(steps.iter().map(|&s| t.observations[s].as_slice()));
        let z = net.encode(&g, params, g.constant(obs))?;
        let z = z.value();
        for (r, &s) in steps.iter().enumerate() {
            data.features.push(z.row_slice(r).to_vec());
            data.labels.push(ids[idx.next[s].expect("filtered")]);
        }
    }
    Ok(data)
}

/// Trains a softmax-linear classifier on a random split of `data`.
///
/// When there are fewer samples than `train + test`, both sides shrink in
/// proportion.
pub fn train_probe(data: &ProbeData, num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let n = data.labels.len();
    if n < 2 || num_classes == 0 {
        return Err(Error::Config(format!(
            "probe needs at least two labelled states, got {n}"
        )));
    }
    let (mut n_train, mut n_test) = (cfg.train, cfg.test);
    if n_train + n_test > n {
        let f = n as f64 / (n_train + n_test) as f64;
        n_train = ((n_train as f64 * f).floor() as usize).max(1);
        n_test = (n - n_train).min(((cfg.test as f64 * f).ceil() as usize).max(1));
        log::warn!(
            "probe: {n} labelled states, fewer than requested {}+{}; using {n_train}+{n_test}",
            cfg.train,
            cfg.test
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, rest) = order.split_at(n_train);
    let test = &rest[..n_test];

    let d = data.features[0].len();
    let mut params = ParamStore::new();
    let w = params.add("probe.w", Tensor::zeros(&[d, num_classes]));
    let b = params.add("probe.b", Tensor::zeros(&[1, num_classes]));
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            learning_rate: cfg.learning_rate as Real,
            ..Default::default()
        },
    );
    let rows = |idx: &[usize]| Tensor::stack_rows(idx.iter().map(|&i| data.features[i].as_slice()));
    let mut shuffled = train.to_vec();
    for _ in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        for mb in shuffled.chunks(cfg.batch_size.max(1)) {
            let g = Graph::new();
            let x = g.constant(rows(mb)?);
            let logits = x.matmul(g.param(&params, w))?.add_row(g.param(&params, b))?;
            let labels: Vec<usize> = mb.iter().map(|&i| data.labels[i]).collect();
            let loss = logits.log_softmax().gather_cols(&labels)?.mean().neg();
            let grads = g.backward(loss)?.for_store(&params);
            adam_step(&mut params, grads, &mut adam, None)?;
        }
    }
    let g = Graph::new();
    let x = g.constant(rows(test)?);
    let probs = x
        .matmul(g.param(&params, w))?
        .add_row(g.param(&params, b))?
        .log_softmax()
        .to_tensor()
        .map(Real::exp);
    let mut correct = 0;
    let mut confidences = Vec::with_capacity(test.len());
    for (r, &i) in test.iter().enumerate() {
        let row = probs.row_slice(r);
        let best = (0..num_classes).fold(0, |a, c| if row[c] > row[a] { c } else { a });
        correct += usize::from(best == data.labels[i]);
        confidences.push(row[data.labels[i]] as f64);
    }
    let mut sorted = confidences.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(ProbeReport {
        train_size: n_train,
        test_size: n_test,
        accuracy: correct as f64 / test.len() as f64,
        confidences,
        median_confidence: median,
    })
}

/// Episodes from the shortest-path planner, taking a uniformly random
/// action with probability `epsilon` at each step.
pub fn expert_episodes(cfg: &KeychainConfig, episodes: usize, seed: u64, epsilon: f64) -> Result<Vec<Trajectory>> {
    let mut env = KeychainEnv::new(cfg.clone())?;
    let seeds = SeedStream { base: seed };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut t = Trajectory::starting_at(env.reset(seeds.seed(0, ep as u64)));
        while !env.is_done() {
            let planned = env.solve().and_then(|p| p.first().copied());
            let a = match planned {
                Some(a) if !rng.gen_bool(epsilon) => a,
                _ => rng.gen_range(0..env.num_actions()),
            };
            let r = env.step(a)?;
            t.push(a, r.reward, r.unlocked, r.observation);
        }
        out.push(t);
    }
    Ok(out)
}

/// Runs the agent's sampled policy until `episodes` episodes complete.
pub fn policy_episodes(
    envs: Vec<Box<dyn AchievementEnv>>,
    net: &AgentNet,
    params: &ParamStore,
    memory: bool,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut collector = Collector::new(VecEnv::new(envs, seed), net.latent_size(), memory);
    let normalizer = ValueNormalizer::new(0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < episodes {
        let (_, done) = collector.collect(net, params, &normalizer, 64, &mut rng)?;
        out.extend(done);
    }
    out.truncate(episodes);
    Ok(out)
}

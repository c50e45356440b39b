//! The outer training loop: policy phases filling an episode buffer,
//! followed by an auxiliary phase over that buffer.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndauto::{AdamConfig, AdamState, ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::{score, MetricsRow, MetricsWriter, SuccessTracker};
use super::RunConfig;
use crate::distill::{auxiliary_phase, AuxStats};
use crate::env::{splitmix64, VecEnv};
use crate::error::{Error, Result};
use crate::net::AgentNet;
use crate::ppo::{ppo_update, Collector, UpdateStats, ValueNormalizer};
use crate::trajectory::Trajectory;

/// Independent random streams derived from the run seed.
pub(crate) fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose)))
}

pub(crate) const STREAM_INIT: u64 = 1;
const STREAM_ENVS: u64 = 2;
const STREAM_ACT: u64 = 3;
const STREAM_PPO: u64 = 4;
const STREAM_AUX: u64 = 5;

/// Builds the network for a config, initialized from the run seed.
pub fn build_agent(cfg: &RunConfig) -> Result<(AgentNet, ParamStore)> {
    let env = cfg.env.build()?;
    let mut rng = stream(cfg.seed, STREAM_INIT);
    AgentNet::new(cfg.net_config(), env.observation_shape(), env.num_actions(), &mut rng)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub updates: u64,
    pub outer_phases: u64,
    pub aux_phases: u64,
    pub episodes: u64,
    pub achievements: Vec<String>,
    /// All-episode success rates, percent.
    pub success: Vec<f64>,
    pub score: f64,
    pub window_success: Vec<f64>,
    pub window_score: f64,
    pub window_reward: f64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct AbortReport<'a> {
    error: String,
    config_hash: String,
    env_steps: u64,
    updates: u64,
    last_update: &'a UpdateStats,
    last_aux: &'a AuxStats,
}

pub fn checkpoint_path(dir: &Path, env_steps: u64) -> PathBuf {
    dir.join(format!("checkpoint-{env_steps:010}.bin"))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    params.write_to(BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    Ok(ParamStore::read_from(std::io::BufReader::new(File::open(path)?))?)
}

struct State {
    env_steps: u64,
    updates: u64,
    last_update: UpdateStats,
    last_aux: AuxStats,
}

/// Runs a full training job, writing `config.toml`, `metrics.csv`,
/// checkpoints and `summary.json` into the output directory. On failure an
/// `abort.json` with diagnostics is left behind.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    let mut state = State {
        env_steps: 0,
        updates: 0,
        last_update: UpdateStats::default(),
        last_aux: AuxStats::default(),
    };
    let result = run(cfg, &mut state);
    if let Err(e) = &result {
        let report = AbortReport {
            error: e.to_string(),
            config_hash: format!("{:016x}", cfg.hash()),
            env_steps: state.env_steps,
            updates: state.updates,
            last_update: &state.last_update,
            last_aux: &state.last_aux,
        };
        std::fs::write(
            cfg.output_dir.join("abort.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    result
}

fn run(cfg: &RunConfig, st: &mut State) -> Result<TrainSummary> {
    let dir = &cfg.output_dir;
    let (net, mut params) = build_agent(cfg)?;
    let envs = (0..cfg.ppo.num_envs)
        .map(|_| cfg.env.build())
        .collect::<Result<Vec<_>>>()?;
    let names = envs[0].graph().names.clone();
    let terms = cfg.aux_terms();
    let distill_active = terms.prediction || terms.matching;
    let mut collector = Collector::new(
        VecEnv::new(envs, splitmix64(cfg.seed ^ STREAM_ENVS)),
        net.latent_size(),
        terms.memory,
    );
    let adam_cfg = |lr: f64| AdamConfig {
        learning_rate: lr as Real,
        ..Default::default()
    };
    let mut adam = AdamState::new(&params, adam_cfg(cfg.ppo.learning_rate));
    let mut aux_adam = AdamState::new(&params, adam_cfg(cfg.distill.learning_rate));
    let mut normalizer = ValueNormalizer::new(cfg.ppo.ewma_decay);
    let (mut act_rng, mut ppo_rng, mut aux_rng) = (
        stream(cfg.seed, STREAM_ACT),
        stream(cfg.seed, STREAM_PPO),
        stream(cfg.seed, STREAM_AUX),
    );
    let mut tracker = SuccessTracker::new(names.len(), cfg.window_steps());
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?), &names)?;
    let mut checkpoint = checkpoint_path(dir, 0);
    save_checkpoint(&checkpoint, &params)?;

    let steps_per_env = cfg.ppo.steps_per_env();
    let mut outer = 0u64;
    let mut aux_phases = 0u64;
    let mut buffer: Vec<Trajectory> = Vec::new();
    while st.env_steps < cfg.total_steps {
        buffer.clear();
        let mut rollouts = 0;
        while rollouts < cfg.distill.policy_phases && st.env_steps < cfg.total_steps {
            let (mut batch, finished) = collector.collect(&net, &params, &normalizer, steps_per_env, &mut act_rng)?;
            batch.finish(cfg.ppo.gamma, cfg.ppo.gae_lambda);
            // Episodes are credited to the end of the rollout that finished them.
            st.env_steps += batch.len() as u64;
            st.last_update = ppo_update(
                &net,
                &mut params,
                &mut adam,
                &mut normalizer,
                &batch,
                &cfg.ppo,
                &mut ppo_rng,
            )?;
            st.updates += 1;
            rollouts += 1;
            for t in &finished {
                tracker.add(st.env_steps, t);
            }
            tracker.advance(st.env_steps);
            if distill_active {
                buffer.extend(finished);
            }
            if let Some(success) = tracker.rates() {
                let window = tracker.window_rates().unwrap_or_else(|| vec![0.0; names.len()]);
                metrics.write(&MetricsRow {
                    update: st.updates,
                    env_steps: st.env_steps,
                    outer_phase: outer,
                    policy_phase: rollouts as u64,
                    episodes: tracker.episodes(),
                    score: score(&success)?,
                    window_score: score(&window)?,
                    window_reward: tracker.window_reward().unwrap_or(0.0),
                    success,
                    ppo: st.last_update,
                    aux_phases,
                    aux: st.last_aux,
                })?;
            }
        }
        if distill_active && rollouts == cfg.distill.policy_phases {
            st.last_aux = auxiliary_phase(
                &net,
                &mut params,
                &mut aux_adam,
                &buffer,
                &cfg.distill,
                terms,
                &mut aux_rng,
            )?;
            aux_phases += 1;
            if st.last_aux.ot_unconverged > 0 {
                log::debug!(
                    "aux phase {aux_phases}: {} transport problems stopped at max_iters (max residual {:.2e})",
                    st.last_aux.ot_unconverged,
                    st.last_aux.ot_max_residual
                );
            }
        }
        outer += 1;
        if cfg.checkpoint_every > 0 && outer.is_multiple_of(cfg.checkpoint_every as u64) {
            checkpoint = checkpoint_path(dir, st.env_steps);
            save_checkpoint(&checkpoint, &params)?;
        }
        log::info!(
            "outer phase {outer}: {} steps, {} episodes, score {:.3}",
            st.env_steps,
            tracker.episodes(),
            tracker.rates().map_or(0.0, |r| score(&r).unwrap_or(0.0))
        );
    }
    let final_path = checkpoint_path(dir, st.env_steps);
    if final_path != checkpoint {
        save_checkpoint(&final_path, &params)?;
    }
    std::fs::copy(&final_path, dir.join("final.bin"))?;
    let success = tracker.rates().unwrap_or_else(|| vec![0.0; names.len()]);
    let window_success = tracker.window_rates().unwrap_or_else(|| vec![0.0; names.len()]);
    let summary = TrainSummary {
        env_steps: st.env_steps,
        updates: st.updates,
        outer_phases: outer,
        aux_phases,
        episodes: tracker.episodes(),
        achievements: names,
        score: score(&success)?,
        window_score: score(&window_success)?,
        window_reward: tracker.window_reward().unwrap_or(0.0),
        success,
        window_success,
        metrics: metrics_path,
        checkpoint: dir.join("final.bin"),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if !summary.score.is_finite() {
        return Err(Error::NonFinite {
            what: "final score".into(),
        });
    }
    Ok(summary)
}

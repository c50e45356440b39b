//! Checks shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod grads;
pub mod rl;

use achdist::env::{AchievementEnv, KeychainConfig, KeychainEnv, Observation, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_keychain() -> KeychainConfig {
    KeychainConfig {
        variant: Variant::Small,
        ..Default::default()
    }
}

type Transcript = Vec<(Observation, f64, Option<usize>)>;

/// One random-action episode, checking that rewards pay exactly the newly
/// set bits of the unlock mask and that every unlock has its prerequisites.
pub fn random_episode(env: &mut dyn AchievementEnv, seed: u64) -> Result<Transcript, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![(env.reset(seed), 0.0, None)];
    let mut before = env.unlocked();
    if before.0 != 0 {
        return Err(format!("seed {seed}: mask {:#b} after reset", before.0));
    }
    while !env.is_done() {
        let r = env
            .step(rng.gen_range(0..env.num_actions()))
            .map_err(|e| e.to_string())?;
        let after = env.unlocked();
        let new = after.0 & !before.0;
        let expected = f64::from(new.count_ones());
        if r.reward != expected || before.0 & !after.0 != 0 {
            return Err(format!(
                "seed {seed}: reward {} for mask {:#b} -> {:#b}",
                r.reward, before.0, after.0
            ));
        }
        if new != 0 && r.unlocked.map(|id| 1u64 << id) != Some(new) {
            return Err(format!(
                "seed {seed}: unlocked {:?} but mask gained {new:#b}",
                r.unlocked
            ));
        }
        for id in (0..env.graph().len()).filter(|&i| new >> i & 1 == 1) {
            let need = env.graph().ancestors(id);
            if before.0 & need != need {
                return Err(format!("seed {seed}: achievement {id} before its prerequisites"));
            }
        }
        if r.done != env.is_done() {
            return Err(format!("seed {seed}: done flag disagrees with is_done"));
        }
        before = after;
        out.push((r.observation, r.reward, r.unlocked));
    }
    Ok(out)
}

/// Reward coupling, prerequisite order and replay determinism for one seed.
pub fn check_env_seed(make: &dyn Fn() -> Box<dyn AchievementEnv>, seed: u64) -> Result<(), String> {
    let a = random_episode(make().as_mut(), seed)?;
    let b = random_episode(make().as_mut(), seed)?;
    let mut reused = make();
    random_episode(reused.as_mut(), seed ^ 0x5555)?;
    let c = random_episode(reused.as_mut(), seed)?;
    if a != b || a != c {
        return Err(format!("seed {seed}: replay differs"));
    }
    Ok(())
}

/// The planner's actions from reset collect every achievement.
pub fn check_solvable(cfg: &KeychainConfig, seed: u64) -> Result<(), String> {
    let mut env = KeychainEnv::new(cfg.clone()).map_err(|e| e.to_string())?;
    env.reset(seed);
    let plan = env.solve().ok_or(format!("seed {seed}: no plan"))?;
    let mut total = 0.0;
    for a in plan {
        total += env.step(a).map_err(|e| e.to_string())?.reward;
    }
    let n = env.graph().len();
    if total != n as f64 || env.unlocked().count() as usize != n {
        return Err(format!("seed {seed}: plan collected {total} of {n}"));
    }
    Ok(())
}

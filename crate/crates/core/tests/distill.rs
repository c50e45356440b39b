mod common;

use achdist::distill::{auxiliary_phase, encode_batch, old_outputs, regularizers, AuxTerms, DistillConfig};
use achdist::net::AgentNet;
use achdist::trajectory::Trajectory;
use common::grads::{random_trajs, tiny_net};
use ndauto::{AdamConfig, AdamState, Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL: AuxTerms = AuxTerms {
    prediction: true,
    matching: true,
    memory: true,
};

fn run_phase(net: &AgentNet, params: &mut ParamStore, buffer: &[Trajectory], cfg: &DistillConfig, terms: AuxTerms) {
    let mut adam = AdamState::new(
        params,
        AdamConfig {
            learning_rate: cfg.learning_rate as _,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    auxiliary_phase(net, params, &mut adam, buffer, cfg, terms, &mut rng).unwrap();
}

/// Mean policy KL and value drift of `params` from `before` on `buffer`.
fn drift(net: &AgentNet, before: &ParamStore, params: &ParamStore, buffer: &[Trajectory]) -> (f64, f64) {
    let refs: Vec<&Trajectory> = buffer.iter().collect();
    let old = old_outputs(net, before, &refs, true).unwrap();
    let g = Graph::new();
    let enc = encode_batch(&g, net, params, &refs, true).unwrap();
    let (kl, dv) = regularizers(&g, net, params, &enc, &old).unwrap();
    (kl.item(), dv.item())
}

#[test]
fn buffers_without_achievements_leave_params_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (net, mut params) = tiny_net(&mut rng);
    let before = params.clone();
    let mut buffer = random_trajs(&mut rng, 6);
    for t in &mut buffer {
        t.rewards.fill(0.0);
        t.unlocked.fill(None);
    }
    run_phase(&net, &mut params, &buffer, &DistillConfig::default(), ALL);
    assert_eq!(params, before);
}

#[test]
fn disabled_terms_leave_params_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (net, mut params) = tiny_net(&mut rng);
    let before = params.clone();
    let buffer = random_trajs(&mut rng, 6);
    let off = AuxTerms {
        prediction: false,
        matching: false,
        memory: true,
    };
    run_phase(&net, &mut params, &buffer, &DistillConfig::default(), off);
    assert_eq!(params, before);
}

#[test]
fn regularizers_limit_output_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (net, init) = tiny_net(&mut rng);
    let buffer = random_trajs(&mut rng, 8);
    let run = |beta: f64| {
        let cfg = DistillConfig {
            beta_policy: beta,
            beta_value: beta,
            aux_epochs: 20,
            learning_rate: 3e-3,
            minibatch_steps: 16,
            ..Default::default()
        };
        let mut p = init.clone();
        run_phase(&net, &mut p, &buffer, &cfg, ALL);
        assert!(p.max_abs_diff(&init) > 0.0);
        drift(&net, &init, &p, &buffer)
    };
    let (free_kl, free_dv) = run(0.0);
    let (held_kl, held_dv) = run(10.0);
    assert!(held_kl < free_kl, "policy KL {held_kl} vs {free_kl}");
    assert!(held_dv < free_dv, "value drift {held_dv} vs {free_dv}");
}

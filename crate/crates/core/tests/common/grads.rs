//! Finite-difference checks of every loss built on the agent network, on
//! small random instances. Each returns the max relative error.

use achdist::distill::{
    encode_batch, match_trajectories, matching_loss, old_outputs, prediction_loss, regularizers, sample_match_triples,
    sample_prediction_pairs,
};
use achdist::net::{achievement_repr, observation_batch, AgentNet, NetConfig};
use achdist::ot::OtConfig;
use achdist::ppo::{ppo_loss, LossInputs, PpoConfig};
use achdist::trajectory::Trajectory;
use ndauto::gradcheck::check_param_grads;
use ndauto::{Graph, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OBS: (usize, usize, usize) = (2, 3, 3);
pub const ACTIONS: usize = 3;

/// A network with every parameter perturbed away from its initial value,
/// so zero-initialized layers and unit norm gains are exercised.
pub fn tiny_net(rng: &mut ChaCha8Rng) -> (AgentNet, ParamStore) {
    let cfg = NetConfig {
        conv_channels: vec![2],
        dense: vec![5],
        film_hidden: 3,
        proj_hidden: 4,
    };
    let (net, mut p) = AgentNet::new(cfg, OBS, ACTIONS, rng).unwrap();
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        for v in p.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (net, p)
}

fn random_obs(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..OBS.0 * OBS.1 * OBS.2).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Episodes of random observations with 2 to 4 achievements drawn from 4
/// ids, at distinct random steps.
pub fn random_trajs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Trajectory> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(6..9);
            let k = rng.gen_range(2..5);
            let steps = rand::seq::index::sample(rng, len, k).into_vec();
            let ids = rand::seq::index::sample(rng, 4, k).into_vec();
            let mut t = Trajectory::starting_at(random_obs(rng));
            for s in 0..len {
                let id = steps.iter().position(|&x| x == s).map(|i| ids[i]);
                let r = if id.is_some() { 1.0 } else { 0.0 };
                t.push(rng.gen_range(0..ACTIONS), r, id, random_obs(rng));
            }
            t
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn film(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let z = weights(4, net.latent_size(), &mut r);
    let w = weights(4, net.latent_size(), &mut r);
    let actions: Vec<usize> = (0..4).map(|_| r.gen_range(0..ACTIONS)).collect();
    check_param_grads(&p, |g, s| {
        let y = net.film(g, s, g.constant(z.clone()), &actions).map_err(nd)?;
        Ok(y.mul(g.constant(w.clone()))?.sum())
    })
    .unwrap()
}

fn nd(e: achdist::Error) -> ndauto::NdError {
    match e {
        achdist::Error::Tensor(e) => e,
        other => panic!("{other}"),
    }
}

/// psi through the encoder, FiLM and projection, with a memory input.
pub fn psi(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let obs = observation_batch(
        (0..4)
            .map(|_| random_obs(&mut r))
            .collect::<Vec<_>>()
            .iter()
            .map(|o| o.as_slice()),
    );
    let mem = weights(4, net.latent_size(), &mut r);
    let w = weights(4, net.latent_size(), &mut r);
    let actions: Vec<usize> = (0..4).map(|_| r.gen_range(0..ACTIONS)).collect();
    check_param_grads(&p, |g, s| {
        let z = net.encode(g, s, g.constant(obs.clone())).map_err(nd)?;
        let y = net
            .state_action_repr(g, s, z, &actions, g.constant(mem.clone()))
            .map_err(nd)?;
        Ok(y.mul(g.constant(w.clone()))?.sum())
    })
    .unwrap()
}

/// nu as the unit difference of consecutive encodings.
pub fn nu(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let before = observation_batch(
        (0..3)
            .map(|_| random_obs(&mut r))
            .collect::<Vec<_>>()
            .iter()
            .map(|o| o.as_slice()),
    );
    let after = observation_batch(
        (0..3)
            .map(|_| random_obs(&mut r))
            .collect::<Vec<_>>()
            .iter()
            .map(|o| o.as_slice()),
    );
    let w = weights(3, net.latent_size(), &mut r);
    check_param_grads(&p, |g, s| {
        let a = net.encode(g, s, g.constant(before.clone())).map_err(nd)?;
        let b = net.encode(g, s, g.constant(after.clone())).map_err(nd)?;
        Ok(achievement_repr(a, b).map_err(nd)?.mul(g.constant(w.clone()))?.sum())
    })
    .unwrap()
}

pub fn prediction(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let trajs = random_trajs(&mut r, 2);
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let pairs = {
        let g = Graph::new();
        let enc = encode_batch(&g, &net, &p, &refs, true).unwrap();
        sample_prediction_pairs(&enc, 2, &mut r)
    };
    assert!(!pairs.is_empty());
    check_param_grads(&p, |g, s| {
        let enc = encode_batch(g, &net, s, &refs, true).map_err(nd)?;
        Ok(prediction_loss(g, &net, s, &enc, &pairs, 0.1)
            .map_err(nd)?
            .expect("pairs"))
    })
    .unwrap()
}

pub fn matching(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let trajs = random_trajs(&mut r, 2);
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let triples = {
        let g = Graph::new();
        let enc = encode_batch(&g, &net, &p, &refs, false).unwrap();
        let m = match_trajectories(&enc, 0, 1, &OtConfig::default());
        sample_match_triples(&enc, &[m], 2, &mut r)
    };
    assert!(!triples.is_empty());
    check_param_grads(&p, |g, s| {
        let enc = encode_batch(g, &net, s, &refs, false).map_err(nd)?;
        Ok(matching_loss(&enc, &triples, 0.1).map_err(nd)?.expect("triples"))
    })
    .unwrap()
}

/// `(policy regularizer error, value regularizer error)` against a
/// perturbed snapshot.
pub fn regularizer(seed: u64) -> (Real, Real) {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let mut snapshot = p.clone();
    let ids: Vec<_> = snapshot.ids().collect();
    for id in ids {
        for v in snapshot.get_mut(id).data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    let trajs = random_trajs(&mut r, 2);
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let old = old_outputs(&net, &snapshot, &refs, true).unwrap();
    let check = |which: usize| {
        check_param_grads(&p, |g, s| {
            let enc = encode_batch(g, &net, s, &refs, true).map_err(nd)?;
            let (kl, dv) = regularizers(g, &net, s, &enc, &old).map_err(nd)?;
            Ok(if which == 0 { kl } else { dv })
        })
        .unwrap()
    };
    (check(0), check(1))
}

pub fn ppo(seed: u64) -> Real {
    let mut r = rng(seed);
    let (net, p) = tiny_net(&mut r);
    let n = 6;
    let obs = observation_batch(
        (0..n)
            .map(|_| random_obs(&mut r))
            .collect::<Vec<_>>()
            .iter()
            .map(|o| o.as_slice()),
    );
    let memory = weights(n, net.latent_size(), &mut r);
    let actions: Vec<usize> = (0..n).map(|_| r.gen_range(0..ACTIONS)).collect();
    let advantages: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let targets: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    // Old log-probs put each ratio in or well outside the clip range, never
    // at its edge.
    let current = {
        let g = Graph::new();
        let z = net.encode(&g, &p, g.constant(obs.clone())).unwrap();
        let out = net.heads(&g, &p, z, g.constant(memory.clone())).unwrap();
        out.dist.log_prob(&actions).unwrap().to_tensor()
    };
    let shifts = [0.0, 0.1, -0.1, 0.5, -0.5, 0.05];
    let old: Vec<f64> = (0..n).map(|i| current.data()[i] + shifts[i]).collect();
    let cfg = PpoConfig::default();
    check_param_grads(&p, |g, s| {
        let x = LossInputs {
            observations: obs.clone(),
            memory: memory.clone(),
            actions: &actions,
            old_log_probs: &old,
            advantages: &advantages,
            targets: &targets,
        };
        Ok(ppo_loss(g, &net, s, &x, &cfg).map_err(nd)?.total)
    })
    .unwrap()
}

/// Layer norm inside the encoder, isolated on its parameters.
pub fn layer_norm(seed: u64) -> Real {
    let mut r = rng(seed);
    let x = weights(3, 6, &mut r);
    let w = weights(3, 6, &mut r);
    let mut store = ParamStore::new();
    let gid = store.add("g", weights(1, 6, &mut r));
    let bid = store.add("b", weights(1, 6, &mut r));
    let in_err = ndauto::gradcheck::check_input_grad(&x, |g, v| {
        Ok(v.layer_norm(g.param(&store, gid), g.param(&store, bid))?
            .mul(g.constant(w.clone()))?
            .sum())
    })
    .unwrap();
    let p_err = check_param_grads(&store, |g, s| {
        Ok(g.constant(x.clone())
            .layer_norm(g.param(s, gid), g.param(s, bid))?
            .mul(g.constant(w.clone()))?
            .sum())
    })
    .unwrap();
    in_err.max(p_err)
}

/// Every check at one seed, by name.
pub fn all(seed: u64) -> Vec<(&'static str, Real)> {
    let (kl, dv) = regularizer(seed);
    vec![
        ("layer_norm", layer_norm(seed)),
        ("film", film(seed)),
        ("psi", psi(seed)),
        ("nu", nu(seed)),
        ("prediction", prediction(seed)),
        ("matching", matching(seed)),
        ("policy_reg", kl),
        ("value_reg", dv),
        ("ppo", ppo(seed)),
    ]
}

use achdist::net::{observation_batch, AgentNet, SizeProfile};
use ndauto::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS: (usize, usize, usize) = (16, 7, 7);
const ACTIONS: usize = 5;

fn build(profile: SizeProfile, seed: u64) -> (AgentNet, ParamStore) {
    AgentNet::new(profile.config(), OBS, ACTIONS, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn obs_batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = OBS.0 * OBS.1 * OBS.2;
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    observation_batch(rows.iter().map(|r| r.as_slice()))
}

/// Log-probabilities of every action, row-major.
fn policy(net: &AgentNet, p: &ParamStore, obs: &Tensor, memory: &Tensor) -> Vec<ndauto::Real> {
    let g = Graph::new();
    let z = net.encode(&g, p, g.constant(obs.clone())).unwrap();
    let out = net.heads(&g, p, z, g.constant(memory.clone())).unwrap();
    out.dist.log_probs().to_tensor().data().to_vec()
}

#[test]
fn shapes_propagate_for_every_profile() {
    for profile in [
        SizeProfile::Tiny,
        SizeProfile::Desk,
        SizeProfile::Wide,
        SizeProfile::WideAlt,
    ] {
        let (net, p) = build(profile, 0);
        let k = net.latent_size();
        let g = Graph::new();
        let z = net.encode(&g, &p, g.constant(obs_batch(3, 1))).unwrap();
        assert_eq!((z.rows(), z.cols()), (3, k), "{profile:?}");
        let mem = g.constant(Tensor::zeros(&[3, k]));
        let out = net.heads(&g, &p, z, mem).unwrap();
        assert_eq!((out.dist.logits().rows(), out.dist.num_actions()), (3, ACTIONS));
        assert_eq!((out.value.rows(), out.value.cols()), (3, 1));
        let psi = net.state_action_repr(&g, &p, z, &[0, 4, 2], mem).unwrap();
        assert_eq!((psi.rows(), psi.cols()), (3, k));
    }
}

#[test]
fn memory_reaches_the_policy() {
    let (net, p) = build(SizeProfile::Tiny, 3);
    let obs = obs_batch(4, 4);
    let zero = Tensor::zeros(&[4, net.latent_size()]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = net.latent_size();
    let mem = Tensor::from_rows(4, k, (0..4 * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (a, b) = (policy(&net, &p, &obs, &zero), policy(&net, &p, &obs, &mem));
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4));

    // The gradient of the chosen-action log-probability reaches the memory input.
    let g = Graph::new();
    let m = g.leaf(mem.requiring_grad());
    let z = net.encode(&g, &p, g.constant(obs)).unwrap();
    let lp = net
        .heads(&g, &p, z, m)
        .unwrap()
        .dist
        .log_prob(&[0, 1, 2, 3])
        .unwrap()
        .sum();
    let grads = g.backward(lp).unwrap();
    assert!(grads.wrt(m).unwrap().data().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn initialization_is_seeded() {
    let (_, a) = build(SizeProfile::Desk, 9);
    let (_, b) = build(SizeProfile::Desk, 9);
    let (_, c) = build(SizeProfile::Desk, 10);
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&c) > 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let (net, p) = build(SizeProfile::Desk, 2);
    let mut bytes = Vec::new();
    p.write_to(&mut bytes).unwrap();
    let q = ParamStore::read_from(bytes.as_slice()).unwrap();
    assert_eq!(p, q);
    let obs = obs_batch(2, 6);
    let mem = Tensor::zeros(&[2, net.latent_size()]);
    assert_eq!(policy(&net, &p, &obs, &mem), policy(&net, &q, &obs, &mem));
}

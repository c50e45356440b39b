mod common;

use achdist::ppo::{compute_gae, ValueNormalizer};
use common::rl::{bandit_run, gae_oracle};
use proptest::prelude::*;

fn trajectory() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, f64)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(prop::bool::weighted(0.15), n),
            -3.0f64..3.0,
        )
    })
}

proptest! {
    #[test]
    fn gae_matches_direct_sum((r, v, d, boot) in trajectory(), gamma in 0.0f64..1.0, lambda in 0.0f64..1.0) {
        let (adv, tgt) = compute_gae(&r, &v, &d, boot, gamma, lambda);
        let want = gae_oracle(&r, &v, &d, boot, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - want[t]).abs() < 1e-10);
            prop_assert!((tgt[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_lambda_targets_are_returns((r, v, _, _) in trajectory(), gamma in 0.0f64..1.0) {
        let mut d = vec![false; r.len()];
        *d.last_mut().unwrap() = true;
        let (_, tgt) = compute_gae(&r, &v, &d, 123.0, gamma, 1.0);
        let mut ret = 0.0;
        for t in (0..r.len()).rev() {
            ret = r[t] + gamma * ret;
            prop_assert!((tgt[t] - ret).abs() < 1e-9);
        }
    }

    #[test]
    fn normalizer_round_trip(batches in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..20), 1..10), v in -100.0f64..100.0) {
        let mut n = ValueNormalizer::new(0.99);
        for b in &batches {
            n.update(b);
            prop_assert!(n.std() > 0.0);
            prop_assert!((n.denormalize(n.normalize(v)) - v).abs() < 1e-9);
        }
    }
}

#[test]
fn bandit_prefers_paying_arm() {
    let (first, p) = bandit_run(0, 200, 0.95);
    eprintln!("first {first:?} final {p}");
    assert!(first.is_some());
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hfalign_core::promptgen::RefinerClient;
use hfalign_core::{ExperimentConfig, Label, ScoreMap};
use hfalign_pipeline::align::{rs_keep, rs_value, rwl_value};
use hfalign_pipeline::eval::{aggregate_votes, PairwiseVote, Vote};
use hfalign_pipeline::experiment::{gen_dims, make_prompts};
use hfalign_pipeline::params::log_sum_exp;
use hfalign_pipeline::toygen::{epoch_order, GenModel};

fn label(i: u8) -> Label {
    [Label::Good, Label::Normal, Label::Bad][i as usize % 3]
}

fn vote(i: u8) -> Vote {
    [Vote::A, Vote::B, Vote::Tie][i as usize % 3]
}

proptest! {
    #[test]
    fn indicator_rwl_is_rs_scaled_by_survival(
        nll in proptest::collection::vec(0.0f64..20.0, 1..40),
        keep_bits in proptest::collection::vec(any::<bool>(), 40),
        real in proptest::collection::vec(0.0f64..20.0, 1..10),
        lambda in 0.0f64..3.0,
    ) {
        let keep = &keep_bits[..nll.len()];
        let kept: Vec<f64> = nll.iter().zip(keep).filter(|(_, k)| **k).map(|(n, _)| *n).collect();
        prop_assume!(!kept.is_empty());
        let rewards: Vec<f64> = keep.iter().map(|&k| f64::from(u8::from(k))).collect();
        let real_mean = real.iter().sum::<f64>() / real.len() as f64;
        let rwl = rwl_value(&nll, &rewards, &real, lambda).unwrap() - lambda * real_mean;
        let rs = rs_value(&kept, &real, lambda).unwrap() - lambda * real_mean;
        let scale = kept.len() as f64 / nll.len() as f64;
        prop_assert!((rwl - scale * rs).abs() <= 1e-9 * (1.0 + rs.abs()));
    }

    #[test]
    fn rwl_grows_with_rewards_on_nonnegative_nll(
        nll in proptest::collection::vec(0.0f64..20.0, 1..30),
        base in proptest::collection::vec(0.0f64..1.0, 30),
        bump in 0usize..30,
        extra in 0.0f64..1.0,
    ) {
        let mut rewards = base[..nll.len()].to_vec();
        let before = rwl_value(&nll, &rewards, &[], 0.0).unwrap();
        rewards[bump % nll.len()] += extra;
        prop_assert!(rwl_value(&nll, &rewards, &[], 0.0).unwrap() >= before);
    }

    #[test]
    fn reward_stays_between_bad_and_good(ls in proptest::collection::vec(0u8..3, 3)) {
        let labels = [label(ls[0]), label(ls[1]), label(ls[2])];
        let m = ScoreMap::DEFAULT;
        let r = m.reward(&labels);
        prop_assert!((m.bad..=m.good).contains(&r));
        // Only all-Good reaches the top score, which is exactly the RS filter.
        prop_assert_eq!(r == m.good, rs_keep(&labels));
    }

    #[test]
    fn vote_shares_add_up(rows in proptest::collection::vec(proptest::collection::vec(0u8..3, 6), 1..25)) {
        let votes: Vec<PairwiseVote> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| PairwiseVote::new(&format!("p{i}"), "a", "b", r.iter().map(|&v| vote(v)).collect(), 3))
            .collect();
        let t = aggregate_votes(votes, 6, 3).unwrap();
        prop_assert!((t.a_wins_pct + t.b_wins_pct + t.ties_pct - 100.0).abs() < 1e-9);
        prop_assert!((t.a_votes_pct + t.b_votes_pct + t.tie_votes_pct - 100.0).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&t.majority_pct));
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..200, seed in any::<u64>()) {
        let mut order = epoch_order(n, &mut ChaCha8Rng::seed_from_u64(seed));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(z in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = log_sum_exp(&z);
        prop_assert!((log_sum_exp(&shifted) - (a + c)).abs() < 1e-9);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= max && a <= max + (z.len() as f64).ln() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_checkpoint_round_trips_bit_exactly(seed in any::<u64>()) {
        let cfg = ExperimentConfig::default();
        let model = GenModel::init(gen_dims(&cfg), cfg.categories.tokenizer(), seed);
        let back = GenModel::from_checkpoint(&model.to_checkpoint().unwrap()).unwrap();
        prop_assert_eq!(&back.params, &model.params);
        let (prompts, _) = make_prompts(&cfg, seed, &RefinerClient::fallback_only()).unwrap();
        prop_assert_eq!(back.sample(&prompts[0], 3), model.sample(&prompts[0], 3));
    }
}

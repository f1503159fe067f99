use std::sync::Arc;

use proptest::prelude::*;

use revrisk::cli::check_flags;
use revrisk::expectation::ProfileSampler;
use revrisk::multi_unit::{compute_psi, verify_psi_bounds, zero_variance_rule};
use revrisk::payment_rules::{eso_futo_rule, make_rule, wpb_bid};
use revrisk::risk::mc_stats;
use revrisk::{AuctionEnvironment, Outcome, PaymentRule, RuleKind, ValueDistribution};

fn dist_strategy() -> impl Strategy<Value = ValueDistribution> {
    prop_oneof![
        (0.5f64..3.0).prop_map(|hi| ValueDistribution::uniform(hi).unwrap()),
        (0.5f64..3.0, 0.5f64..3.0).prop_map(|(a, hi)| ValueDistribution::power(a, hi).unwrap()),
    ]
}

fn iid_env() -> impl Strategy<Value = Arc<AuctionEnvironment>> {
    (2usize..=6, dist_strategy()).prop_flat_map(|(n, d)| {
        (1..n).prop_map(move |k| Arc::new(AuctionEnvironment::iid(n, k, d.clone()).unwrap()))
    })
}

fn single_item_env() -> impl Strategy<Value = Arc<AuctionEnvironment>> {
    prop::collection::vec(dist_strategy(), 2..=4)
        .prop_map(|ds| Arc::new(AuctionEnvironment::asymmetric(ds).unwrap()))
}

fn max_revenue_deviation(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    target: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    ProfileSampler::new(env, samples, seed)
        .run(
            || (0.0f64, Outcome::new(env.n())),
            |acc: &mut (f64, Outcome), v| {
                rule.apply_into(v, &mut acc.1);
                acc.0 = acc.0.max((acc.1.revenue() - target).abs());
            },
        )
        .into_iter()
        .fold(0.0, |m, b| m.max(b.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wpb_bids_are_monotone_and_below_value(env in iid_env()) {
        let hi = env.dist(0).support_hi();
        let mut prev = 0.0;
        for j in 0..=200 {
            let v = hi * j as f64 / 200.0;
            let b = wpb_bid(&env, 0, v);
            prop_assert!(b >= prev - 1e-12, "bid drops at v = {v}: {prev} -> {b}");
            prop_assert!(b <= v + 1e-12);
            prev = b;
        }
    }

    #[test]
    fn flags_hold_on_sampled_profiles(env in single_item_env(), seed in any::<u64>()) {
        for kind in [RuleKind::SecondPrice, RuleKind::AllPay, RuleKind::Wpb, RuleKind::EsoFuto] {
            let rule = make_rule(&env, kind).unwrap();
            let f = rule.flags();
            let fc = check_flags(&env, rule.as_ref(), 20_000, seed);
            if f.ex_post_ir {
                prop_assert!(fc.min_utility >= -1e-12, "{kind}: {fc:?}");
            }
            if f.nonneg_payments {
                prop_assert!(fc.min_payment >= -1e-12, "{kind}: {fc:?}");
            }
            if f.losers_pay_zero {
                prop_assert!(fc.max_loser_payment <= 1e-12, "{kind}: {fc:?}");
            }
        }
    }

    #[test]
    fn eso_futo_revenue_is_constant(env in iid_env(), seed in any::<u64>()) {
        let rule = eso_futo_rule(&env);
        let r = rule.constant_revenue();
        prop_assert!((r - env.expected_revenue()).abs() < 1e-9);
        let dev = max_revenue_deviation(&env, &rule, r, 20_000, seed);
        prop_assert!(dev <= 1e-12 * r.max(1.0), "{dev}");
    }

    #[test]
    fn revenue_equivalent_rules_share_the_mean(env in single_item_env(), seed in any::<u64>()) {
        let exact = env.expected_revenue();
        for kind in [RuleKind::SecondPrice, RuleKind::AllPay, RuleKind::Wpb] {
            let rule = make_rule(&env, kind).unwrap();
            let s = mc_stats(&env, rule.as_ref(), &[], 50_000, seed).unwrap();
            let se = s.stderr.unwrap().mean;
            prop_assert!((s.mean - exact).abs() <= 5.0 * se + 1e-12, "{kind}: {} vs {exact}", s.mean);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn psi_rule_has_zero_variance_and_bounded_payments(
        nk in prop::sample::select(vec![(3usize, 2usize), (4, 2), (4, 3), (5, 2), (5, 4), (6, 3)]),
        alpha in 0.8f64..3.0,
        hi in 0.5f64..2.0,
        seed in any::<u64>(),
    ) {
        let env = Arc::new(
            AuctionEnvironment::iid(nk.0, nk.1, ValueDistribution::power(alpha, hi).unwrap()).unwrap(),
        );
        let sol = Arc::new(compute_psi(&env, 1024).unwrap());
        let b = verify_psi_bounds(&sol);
        prop_assert!(b.passed(), "{b:?}");
        prop_assert!((sol.rbar - env.expected_revenue()).abs() < 1e-8);
        let rbar = sol.rbar;
        let rule = zero_variance_rule(sol).unwrap();
        let dev = max_revenue_deviation(&env, &rule, rbar, 10_000, seed);
        prop_assert!(dev < 1e-8, "{dev}");
    }
}

/// Per-bidder payment variance: all-pay is the conditional mean of every
/// revenue-equivalent rule, so on common draws it cannot be beaten.
#[test]
fn all_pay_minimises_per_bidder_variance() {
    let env = Arc::new(
        AuctionEnvironment::asymmetric(vec![
            ValueDistribution::uniform(1.0).unwrap(),
            ValueDistribution::power(2.0, 1.0).unwrap(),
            ValueDistribution::power(0.7, 1.5).unwrap(),
        ])
        .unwrap(),
    );
    let samples = 100_000;
    let ap = make_rule(&env, RuleKind::AllPay).unwrap();
    for kind in [RuleKind::SecondPrice, RuleKind::Wpb, RuleKind::EsoFuto] {
        let other = make_rule(&env, kind).unwrap();
        let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(samples); env.n()];
        let blocks = ProfileSampler::new(&env, samples, 5).run(
            || (Vec::new(), Outcome::new(3), Outcome::new(3)),
            |acc: &mut (Vec<[f64; 6]>, Outcome, Outcome), v| {
                ap.apply_into(v, &mut acc.1);
                other.apply_into(v, &mut acc.2);
                let (a, o) = (&acc.1.payments, &acc.2.payments);
                acc.0.push([a[0], o[0], a[1], o[1], a[2], o[2]]);
            },
        );
        for b in blocks {
            for row in b.0 {
                for (i, p) in pairs.iter_mut().enumerate() {
                    p.push((row[2 * i], row[2 * i + 1]));
                }
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            let m = p.len() as f64;
            let ma = p.iter().map(|x| x.0).sum::<f64>() / m;
            let mo = p.iter().map(|x| x.1).sum::<f64>() / m;
            let d: Vec<f64> = p
                .iter()
                .map(|x| (x.1 - mo).powi(2) - (x.0 - ma).powi(2))
                .collect();
            let gap = d.iter().sum::<f64>() / m;
            let se = (d.iter().map(|x| (x - gap).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
            assert!(
                gap >= -3.0 * se,
                "{kind}, bidder {i}: gap {gap} stderr {se}"
            );
        }
    }
}

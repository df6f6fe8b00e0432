use moralis::model::{
    feasible_region, kappa_threshold, predicts_selfish, utility_difference, utility_full, Awareness, PatternEntry,
    PayoffConfiguration, PayoffTable, PreferenceParameters,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn payoff_strategy() -> impl Strategy<Value = PayoffConfiguration> {
    (1.0f64..200.0, 0.0f64..100.0, 0.5f64..100.0, 0.5f64..100.0)
        .prop_map(|(e2, gap, g, l)| PayoffConfiguration::new(99, e2 + gap + 1.0, e2, g, l).unwrap())
}

fn awareness() -> impl Strategy<Value = Awareness> {
    (0.5f64..=1.0).prop_map(|p| Awareness::new(p).unwrap())
}

proptest! {
    #[test]
    fn voi_prediction_matches_threshold(id in 1u32..=20, beta in -1.0f64..1.0, kappa in -0.5f64..3.0) {
        let table = PayoffTable::builtin();
        let payoff = table.get(id).unwrap();
        let params = PreferenceParameters::new(beta, kappa, 1.0);
        let threshold = kappa_threshold(beta, payoff);
        // skip a hair around the boundary where the two sides round differently
        prop_assume!((kappa - threshold).abs() > 1e-9);
        prop_assert_eq!(predicts_selfish(&params, payoff, Awareness::VOI), kappa <= threshold);
    }

    #[test]
    fn boundary_is_selfish(id in 1u32..=20, beta in -1.0f64..1.0) {
        let table = PayoffTable::builtin();
        let payoff = table.get(id).unwrap();
        let params = PreferenceParameters::new(beta, kappa_threshold(beta, payoff), 1.0);
        let d = utility_difference(&params, payoff, Awareness::VOI);
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn difference_decreasing_in_kappa(
        payoff in payoff_strategy(), beta in -1.0f64..1.0, k1 in 0.0f64..2.0, dk in 1e-3f64..1.0, a in awareness()
    ) {
        let lo = utility_difference(&PreferenceParameters::new(beta, k1, 1.0), &payoff, a);
        let hi = utility_difference(&PreferenceParameters::new(beta, k1 + dk, 1.0), &payoff, a);
        if a.value() < 1.0 {
            prop_assert!(hi < lo);
        } else {
            prop_assert_eq!(hi, lo);
        }
    }

    #[test]
    fn difference_monotone_in_awareness(
        payoff in payoff_strategy(), beta in -1.0f64..1.0, kappa in 0.0f64..2.0, p in 0.5f64..1.0, dp in 0.0f64..0.5
    ) {
        let params = PreferenceParameters::new(beta, kappa, 1.0);
        let lo = utility_difference(&params, &payoff, Awareness::new(p).unwrap());
        let hi = utility_difference(&params, &payoff, Awareness::new((p + dp).min(1.0)).unwrap());
        prop_assert!(hi >= lo - 1e-9);
    }

    #[test]
    fn full_utility_consistent_under_voi(
        payoff in payoff_strategy(), beta in -1.0f64..1.0, kappa in -1.0f64..2.0, alpha in -2.0f64..2.0, y: bool
    ) {
        let params = PreferenceParameters::new(beta, kappa, 1.0).with_alpha(alpha);
        let a = Awareness::VOI;
        let diff = utility_full(&params, &payoff, a, true, y) - utility_full(&params, &payoff, a, false, y);
        let want = utility_difference(&params, &payoff, a);
        prop_assert!((2.0 * diff - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn full_utility_consistent_when_unaware(
        payoff in payoff_strategy(), beta in -1.0f64..1.0, kappa in -1.0f64..2.0, alpha in -2.0f64..2.0, y: bool
    ) {
        let params = PreferenceParameters::new(beta, kappa, 1.0).with_alpha(alpha);
        let a = Awareness::FULLY_UNAWARE;
        let diff = utility_full(&params, &payoff, a, true, y) - utility_full(&params, &payoff, a, false, y);
        let want = utility_difference(&params, &payoff, a);
        prop_assert!((diff - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn z_in_unit_interval(payoff in payoff_strategy()) {
        let z = payoff.z();
        prop_assert!(z > 0.0 && z < 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_region_reproduces_pattern(
        beta in -0.5f64..0.8, kappa in 0.0f64..1.5, subset in proptest::collection::btree_set(1u32..=20, 1..=20), seed: u64
    ) {
        let table = PayoffTable::builtin();
        let truth = PreferenceParameters::new(beta, kappa, 1.0);
        let pattern: Vec<PatternEntry> = subset
            .iter()
            .map(|&id| {
                let p = *table.get(id).unwrap();
                PatternEntry::new(
                    p,
                    predicts_selfish(&truth, &p, Awareness::FULLY_UNAWARE),
                    predicts_selfish(&truth, &p, Awareness::VOI),
                )
            })
            .collect();
        let region = feasible_region(&pattern);
        prop_assert!(region.contains(beta, kappa));
        prop_assume!(!region.empty);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inside = 0;
        for _ in 0..1000 {
            let w: Vec<f64> = region.polygon.iter().map(|_| rng.random::<f64>()).collect();
            let total: f64 = w.iter().sum();
            let (b, k) = region
                .polygon
                .iter()
                .zip(&w)
                .fold((0.0, 0.0), |(b, k), (&(pb, pk), wi)| (b + pb * wi / total, k + pk * wi / total));
            if !region.contains(b, k) {
                continue;
            }
            inside += 1;
            let params = PreferenceParameters::new(b, k, 1.0);
            for e in &pattern {
                prop_assert_eq!(predicts_selfish(&params, &e.payoff, Awareness::FULLY_UNAWARE), e.sells_nonvoi);
                prop_assert_eq!(predicts_selfish(&params, &e.payoff, Awareness::VOI), e.sells_voi);
            }
        }
        prop_assert!(inside >= 990, "only {} of 1000 interior samples were inside", inside);
    }
}

#[test]
fn contradictory_pattern_is_empty() {
    let table = PayoffTable::builtin();
    let p = |id| *table.get(id).unwrap();
    // switch on payoffs 1 and 20, sell under both conditions on payoff 4
    let pattern = [
        PatternEntry::new(p(1), true, false),
        PatternEntry::new(p(20), true, false),
        PatternEntry::new(p(4), true, true),
    ];
    let region = feasible_region(&pattern);
    assert!(region.empty);

    // brute force over a fine grid finds no point either
    let mut b = -1.0;
    while b <= 1.0 {
        let mut k = 0.0;
        while k <= 3.0 {
            let params = PreferenceParameters::new(b, k, 1.0);
            let reproduces = pattern.iter().all(|e| {
                predicts_selfish(&params, &e.payoff, Awareness::FULLY_UNAWARE) == e.sells_nonvoi
                    && predicts_selfish(&params, &e.payoff, Awareness::VOI) == e.sells_voi
            });
            assert!(!reproduces, "({b}, {k}) reproduces an infeasible pattern");
            k += 0.005;
        }
        b += 0.005;
    }
}

#[test]
fn equal_gain_and_loss_is_half() {
    let p = PayoffConfiguration::new(1, 100.0, 50.0, 20.0, 20.0).unwrap();
    assert!((p.z() - 0.5).abs() < 1e-15);
    for beta in [-0.3, 0.0, 0.2, 0.45] {
        assert!((kappa_threshold(beta, &p) - (1.0 - 2.0 * beta)).abs() < 1e-12);
    }
}

#[test]
fn invalid_payoffs_are_rejected() {
    assert!(PayoffConfiguration::new(1, 100.0, 50.0, 20.0, 0.0).is_err());
    assert!(PayoffConfiguration::new(1, 100.0, 50.0, -1.0, 10.0).is_err());
    assert!(PayoffConfiguration::new(1, 50.0, 100.0, 20.0, 10.0).is_err());
    assert!(Awareness::new(0.4).is_err());
    assert!(Awareness::new(1.01).is_err());
}

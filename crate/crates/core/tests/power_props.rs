use moralis::model::{Frame, PayoffTable, PreferenceParameters};
use moralis::power::{power_simulation, PowerSpec};
use moralis::regress::RegressionSpec;
use moralis::simulate::{PopulationComponent, PopulationSpec};

fn spec(n_sims: usize, seed: u64) -> PowerSpec {
    PowerSpec {
        population: PopulationSpec::new(vec![
            PopulationComponent::new(0.5, PreferenceParameters::new(0.15, 0.02, 0.1)),
            PopulationComponent::new(0.5, PreferenceParameters::new(0.05, 0.06, 0.1)),
        ])
        .unwrap(),
        n_voi: 30,
        n_nonvoi: 30,
        n_sims,
        alpha: 0.05,
        regression: RegressionSpec::default(),
        frame: Frame::Neutral,
        seed,
    }
}

fn spread(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[test]
fn batch_spread_shrinks_with_root_n() {
    let t = PayoffTable::builtin();
    let batches = 24;
    let small: Vec<f64> = (0..batches)
        .map(|b| power_simulation(&spec(40, 100 + b), &t).unwrap().power)
        .collect();
    let large: Vec<f64> = (0..batches)
        .map(|b| power_simulation(&spec(160, 900 + b), &t).unwrap().power)
        .collect();
    let ratio = spread(&small) / spread(&large);
    // sqrt(160 / 40) = 2; the spread ratio of 24 batches is itself noisy
    assert!((1.3..3.1).contains(&ratio), "spread ratio {ratio}");

    let a = power_simulation(&spec(100, 1), &t).unwrap();
    let b = power_simulation(&spec(400, 1), &t).unwrap();
    let expected = (a.power * (1.0 - a.power) / 100.0).sqrt();
    assert!((a.mc_se - expected).abs() < 1e-12);
    assert!(b.mc_se < a.mc_se);
}

#[test]
fn fixed_seed_fixed_output() {
    let t = PayoffTable::builtin();
    let a = power_simulation(&spec(60, 5), &t).unwrap();
    let b = power_simulation(&spec(60, 5), &t).unwrap();
    assert_eq!(a, b);
    let c = power_simulation(&spec(60, 6), &t).unwrap();
    assert_ne!(a.p_values(), c.p_values());
}

#[test]
fn replication_counts_add_up() {
    let t = PayoffTable::builtin();
    let r = power_simulation(&spec(80, 9), &t).unwrap();
    assert_eq!(r.n_success + r.n_failed, 80);
    assert_eq!(r.replications.len(), 80);
    let rejected = r.replications.iter().filter(|x| x.rejected).count();
    assert!((r.power - rejected as f64 / r.n_success as f64).abs() < 1e-15);
}

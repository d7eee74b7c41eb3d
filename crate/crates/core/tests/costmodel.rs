mod common;

use common::{random_cascade, simulate_cascade as simulate};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visplan::costmodel::{
    estimation_error, throughput_exec_only, throughput_min, throughput_sum, CascadeSpec, CascadeStage, CostModel,
};

#[test]
fn exec_only_matches_discrete_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 1_000_000;
    for _ in 0..50 {
        let cascade = random_cascade(&mut rng);
        let (simulated, reached) = simulate(&cascade, n, &mut rng);
        let analytic = throughput_exec_only(&cascade).value;
        assert!((simulated - analytic).abs() / analytic < 1e-3, "{cascade:?}: {simulated} vs {analytic}");
        for (k, s) in reached.iter().zip(cascade.stages()) {
            assert!((*k as f64 / n as f64 - s.alpha).abs() < 1e-3, "{reached:?} vs {cascade:?}");
        }
    }
}

#[test]
fn table_rows_against_hand_formulas() {
    let rows = [(4001.0, 4999.0, 4056.0), (534.0, 4999.0, 557.0), (5876.0, 1844.0, 1720.0)];
    let expected_sum = [2222, 482, 1404];
    for ((p, e, m), sum) in rows.into_iter().zip(expected_sum) {
        let c = CascadeSpec::single(e).unwrap();
        let by_hand = p * e / (p + e);
        assert!((throughput_sum(p, &c).value - by_hand).abs() < 1e-9);
        assert_eq!(throughput_sum(p, &c).rounded(), sum);
        assert_eq!(throughput_min(p, &c).value, p.min(e));
        assert_eq!(throughput_exec_only(&c).value, e);
        let err = estimation_error(p.min(e), m);
        assert!((err - 100.0 * (p.min(e) - m).abs() / m).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn model_ordering(p in 1.0f64..1e5, e in 1.0f64..1e5, pass in 0.01f64..=1.0, e2 in 1.0f64..1e5) {
        let c = CascadeSpec::from_pass_rates(&[(e, pass), (e2, 1.0)]).unwrap();
        let exec = throughput_exec_only(&c).value;
        let min = throughput_min(p, &c).value;
        let sum = throughput_sum(p, &c).value;
        prop_assert!(sum < min && min <= exec);
        prop_assert_eq!(min, p.min(exec));
        for m in CostModel::ALL {
            prop_assert_eq!(m.estimate(p, &c).model, m);
        }
    }

    #[test]
    fn cheaper_filters_never_slow_a_cascade(e in 10.0f64..1e4, e2 in 10.0f64..1e4, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let stage = |alpha| CascadeStage { exec_throughput: e2, alpha };
        let fast = CascadeSpec::new(vec![CascadeStage { exec_throughput: e, alpha: 1.0 }, stage(lo)]).unwrap();
        let slow = CascadeSpec::new(vec![CascadeStage { exec_throughput: e, alpha: 1.0 }, stage(hi)]).unwrap();
        prop_assert!(throughput_exec_only(&fast).value >= throughput_exec_only(&slow).value);
    }
}

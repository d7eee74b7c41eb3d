mod common;

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use visplan::catalog::{generate_plans, load_catalog};
use visplan::dagopt::{Normalization, PreprocGraph, PreprocOp};
use visplan::planner::{
    dollar_cost, fit_core_price, pareto_frontier, place_operators, select_plan, Constraint, InstancePricing, OpProfile,
    PlanConfig, PlannerError,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/catalog").join(name)
}

fn with_scores(template: &PlanConfig, points: &[(f64, f64)]) -> Vec<PlanConfig> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(acc, thr))| PlanConfig {
            id: format!("p{i:03}"),
            est_accuracy: acc,
            est_throughput: thr,
            ..template.clone()
        })
        .collect()
}

/// Pairwise dominance, written out directly.
fn brute_force_front(plans: &[PlanConfig]) -> BTreeSet<String> {
    plans
        .iter()
        .filter(|p| {
            !plans.iter().any(|q| {
                q.est_accuracy >= p.est_accuracy
                    && q.est_throughput >= p.est_throughput
                    && (q.est_accuracy > p.est_accuracy || q.est_throughput > p.est_throughput)
            })
        })
        .map(|p| p.id.clone())
        .collect()
}

fn point_sets() -> impl Strategy<Value = Vec<(f64, f64)>> {
    // Coarse grids make ties on either axis common.
    prop::collection::vec(
        ((0u32..40).prop_map(|a| 0.5 + a as f64 / 100.0), (1u32..60).prop_map(|t| t as f64 * 100.0)),
        1..=200,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pareto_matches_brute_force(points in point_sets()) {
        let plans = with_scores(&common::tiny_plan(1.0, 1.0), &points);
        let front = pareto_frontier(&plans);
        let ids: BTreeSet<String> = front.iter().map(|p| p.id.clone()).collect();
        prop_assert_eq!(ids.len(), front.len());
        prop_assert_eq!(ids, brute_force_front(&plans));
        prop_assert!(front.windows(2).all(|w| w[0].est_accuracy <= w[1].est_accuracy));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn selection_is_pareto_and_monotone(points in point_sets(), a in 0.5f64..0.9, b in 0.5f64..0.9) {
        let plans = with_scores(&common::tiny_plan(1.0, 1.0), &points);
        let front: BTreeSet<String> = pareto_frontier(&plans).into_iter().map(|p| p.id).collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let low = select_plan(&plans, Constraint::min_accuracy(lo));
        let high = select_plan(&plans, Constraint::min_accuracy(hi));
        if let Ok(h) = &high {
            prop_assert!(front.contains(&h.id));
            let l = low.as_ref().expect("a weaker bound stays feasible");
            prop_assert!(h.est_throughput <= l.est_throughput);
        }
        for c in [Constraint::none(), Constraint::min_throughput(lo * 5000.0)] {
            if let Ok(p) = select_plan(&plans, c) {
                prop_assert!(front.contains(&p.id), "{:?} picked dominated {}", c, p.id);
            }
        }
    }
}

#[test]
fn frontier_drops_dominated_plans() {
    let plans = with_scores(&common::tiny_plan(1.0, 1.0), &[(0.70, 1000.0), (0.75, 500.0), (0.72, 400.0)]);
    let ids: Vec<String> = pareto_frontier(&plans).into_iter().map(|p| p.id).collect();
    assert_eq!(ids, ["p000", "p001"]);
    let twins = with_scores(&common::tiny_plan(1.0, 1.0), &[(0.7, 10.0), (0.7, 10.0)]);
    assert_eq!(pareto_frontier(&twins).len(), 2);
}

#[test]
fn thumbnails_beat_full_resolution_under_accuracy_floor() {
    let catalog = load_catalog(fixture("thumbnails.json")).unwrap();
    let plans = generate_plans(&catalog);
    assert_eq!(plans.len(), 4);
    let by_id = |id: &str| plans.iter().find(|p| p.id == id).unwrap();
    assert_eq!(by_id("ResNet-34@full").est_throughput, 527.0);
    assert_eq!(by_id("ResNet-50@161-PNG").est_throughput, 1995.0);
    let chosen = select_plan(&plans, Constraint::min_accuracy(0.72)).unwrap();
    assert_eq!(chosen.id, "ResNet-50@161-PNG");
    assert_eq!(chosen.est_accuracy, 0.75);

    match select_plan(&plans, Constraint::min_throughput(1e9)) {
        Err(PlannerError::Infeasible { nearest, .. }) => assert_eq!(nearest, 1995.0),
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn cascades_use_calibration_accuracy() {
    let catalog = load_catalog(fixture("resnets.json")).unwrap();
    let plans = generate_plans(&catalog);
    assert_eq!(plans.len(), 8);
    let by_id = |id: &str| plans.iter().find(|p| p.id == id).unwrap();
    let cascade = by_id("resnet18+resnet50@full");
    assert_eq!(cascade.est_accuracy, 0.8);
    assert_eq!(by_id("resnet50@full").est_accuracy, 0.9);
    // No calibration column: the profile value stands.
    assert_eq!(by_id("resnet50@thumb").est_accuracy, 0.7092);
    // resnet18 forwards a quarter of its inputs.
    let exec = 1.0 / (1.0 / 12592.0 + 0.25 / 4513.0);
    assert!((cascade.placement.accel_overhead_throughput - exec).abs() < 1e-9);
    assert_eq!(cascade.est_throughput, 527.0);
}

fn chain(n: usize) -> PreprocGraph {
    let ops = [
        PreprocOp::Decode,
        PreprocOp::Resize { height: 64, width: 64, map: None },
        PreprocOp::Crop { top: 4, left: 4, height: 56, width: 56 },
        PreprocOp::ConvertDtype,
        PreprocOp::Normalize(Normalization::imagenet()),
        PreprocOp::ChannelReorder,
    ];
    PreprocGraph::new(100, 120, 3, ops[..n].to_vec()).unwrap()
}

/// Scores every split from scratch; ties go to the larger split.
fn best_split(profile: &[OpProfile], exec: f64) -> (usize, f64) {
    let n = profile.len();
    let mut best = (0, f64::NEG_INFINITY);
    for split in 0..=n {
        if profile[split..].iter().any(|p| p.accel.is_none()) {
            continue;
        }
        let cpu =
            if split == 0 { f64::INFINITY } else { 1.0 / profile[..split].iter().map(|p| 1.0 / p.cpu).sum::<f64>() };
        let accel = 1.0 / (1.0 / exec + profile[split..].iter().map(|p| 1.0 / p.accel.unwrap()).sum::<f64>());
        let score = cpu.min(accel);
        if score >= best.1 {
            best = (split, score);
        }
    }
    best
}

fn profiles(n: usize) -> impl Strategy<Value = Vec<OpProfile>> {
    let op = (100.0f64..20_000.0, prop::option::weighted(0.8, 100.0f64..50_000.0))
        .prop_map(|(cpu, accel)| OpProfile { cpu, accel });
    prop::collection::vec(op, n)
}

proptest! {
    #[test]
    fn placement_matches_exhaustive_scoring(
        (n, profile) in (1usize..=6).prop_flat_map(|n| (Just(n), profiles(n))),
        exec in 100.0f64..20_000.0,
    ) {
        let split = place_operators(&chain(n), &profile, exec).unwrap();
        let (expected, score) = best_split(&profile, exec);
        prop_assert_eq!(split.split_index, expected);
        prop_assert!((split.throughput() - score).abs() <= 1e-9 * score);
    }

    #[test]
    fn dollar_cost_is_inverse_in_throughput(t in 1.0f64..1e6, price in 0.01f64..50.0) {
        prop_assert_eq!(dollar_cost(2.0 * t, price), dollar_cost(t, price) / 2.0);
    }
}

#[test]
fn placement_examples() {
    let cpu_only = |cpu| OpProfile { cpu, accel: None };
    let movable = |cpu, accel| OpProfile { cpu, accel: Some(accel) };
    // DNN-bound: everything stays on the CPU.
    let p = [cpu_only(20_000.0), movable(20_000.0, 50_000.0), movable(20_000.0, 50_000.0)];
    assert_eq!(place_operators(&chain(3), &p, 1844.0).unwrap().split_index, 3);
    assert!(matches!(place_operators(&chain(3), &p[..2], 1844.0), Err(PlannerError::ProfileMismatch { .. })));
    assert_eq!(place_operators(&chain(1), &[cpu_only(534.0)], 4999.0).unwrap().split_index, 1);
}

#[test]
fn g4dn_pricing_fit() {
    let csv = "vcpus,hourly_usd\n4,0.526\n8,0.752\n16,1.204\n32,2.176\n64,4.352\n";
    let pricing = InstancePricing::from_csv(csv.as_bytes()).unwrap();
    assert_eq!(pricing.points(), InstancePricing::g4dn().points());
    let fit = fit_core_price(&pricing).unwrap();
    assert!((fit.per_core - 0.0639).abs() < 5e-4, "{fit:?}");
    assert!((fit.accelerator - 0.218).abs() < 5e-3, "{fit:?}");
    assert!(fit.r_squared >= 0.995);
    assert!(InstancePricing::from_csv("vcpus,hourly_usd\n4,0.5\n4,0.6\n".as_bytes()).is_err());
}

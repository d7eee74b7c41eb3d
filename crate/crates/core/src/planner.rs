//! Plan selection, operator placement and dollar-cost accounting.

use std::cmp::Ordering;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{DnnProfile, InputFormat};
use crate::costmodel::CascadeSpec;
use crate::dagopt::PreprocGraph;

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("no plans to choose from")]
    NoPlans,
    #[error("infeasible: no plan reaches {kind} {bound}; the best available is {nearest}")]
    Infeasible { kind: &'static str, bound: f64, nearest: f64 },
    #[error("preprocessing graph is empty")]
    EmptyGraph,
    #[error("profile covers {profiles} ops but the graph has {ops}")]
    ProfileMismatch { profiles: usize, ops: usize },
    #[error("throughput of op {index} must be positive, got {value}")]
    BadThroughput { index: usize, value: f64 },
    #[error("price fit needs at least two points with distinct vCPU counts")]
    DegenerateFit,
    #[error("pricing: {0}")]
    Pricing(String),
}

/// Where the preprocessing chain is cut between CPU and accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementSplit {
    /// Ops `[0, split_index)` run on the CPU, the rest on the accelerator.
    pub split_index: usize,
    pub cpu_preproc_throughput: f64,
    /// Executor throughput after absorbing the accelerator-side ops.
    pub accel_overhead_throughput: f64,
}

impl PlacementSplit {
    /// Pipelined throughput of the two sides.
    pub fn throughput(&self) -> f64 {
        self.cpu_preproc_throughput.min(self.accel_overhead_throughput)
    }
}

/// One candidate configuration: a cascade of DNNs on one input format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub id: String,
    pub format: InputFormat,
    pub dnns: Vec<DnnProfile>,
    pub cascade: CascadeSpec,
    pub preproc_plan: PreprocGraph,
    pub placement: PlacementSplit,
    /// `min` cost-model estimate, images per second.
    pub est_throughput: f64,
    pub est_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    MinThroughput,
    MinAccuracy,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub bound: f64,
}

impl Constraint {
    pub fn min_throughput(bound: f64) -> Self {
        Self { kind: ConstraintKind::MinThroughput, bound }
    }

    pub fn min_accuracy(bound: f64) -> Self {
        Self { kind: ConstraintKind::MinAccuracy, bound }
    }

    pub fn none() -> Self {
        Self { kind: ConstraintKind::None, bound: 0.0 }
    }
}

/// Plans no other plan beats on both accuracy and throughput, sorted by
/// accuracy ascending, then by id. Exact ties are all kept.
pub fn pareto_frontier(plans: &[PlanConfig]) -> Vec<PlanConfig> {
    let mut order: Vec<&PlanConfig> = plans.iter().collect();
    // Accuracy descending, throughput descending: a plan can only be
    // dominated by one that comes earlier.
    order.sort_by(|a, b| b.est_accuracy.total_cmp(&a.est_accuracy).then(b.est_throughput.total_cmp(&a.est_throughput)));
    let mut front: Vec<PlanConfig> = Vec::new();
    let mut best_throughput = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Plans sharing one accuracy value are judged as a group.
        let acc = order[i].est_accuracy;
        let mut j = i;
        while j < order.len() && order[j].est_accuracy == acc {
            j += 1;
        }
        let group_best = order[i].est_throughput;
        for p in &order[i..j] {
            if p.est_throughput == group_best && p.est_throughput > best_throughput {
                front.push((*p).clone());
            }
        }
        best_throughput = best_throughput.max(group_best);
        i = j;
    }
    front.sort_by(|a, b| a.est_accuracy.total_cmp(&b.est_accuracy).then_with(|| a.id.cmp(&b.id)));
    front
}

/// Picks the plan that best satisfies `constraint`.
///
/// * `MinThroughput(b)`: most accurate plan with throughput at least `b`;
///   ties go to the faster plan.
/// * `MinAccuracy(b)`: fastest plan with accuracy at least `b`; ties go to
///   the more accurate plan.
/// * `None`: fastest plan, ties to the more accurate.
///
/// Remaining ties go to the smaller plan id.
pub fn select_plan(plans: &[PlanConfig], constraint: Constraint) -> Result<PlanConfig, PlannerError> {
    if plans.is_empty() {
        return Err(PlannerError::NoPlans);
    }
    let by_id = |a: &&PlanConfig, b: &&PlanConfig| b.id.cmp(&a.id);
    let faster = |a: &&PlanConfig, b: &&PlanConfig| {
        a.est_throughput
            .total_cmp(&b.est_throughput)
            .then(a.est_accuracy.total_cmp(&b.est_accuracy))
            .then_with(|| by_id(a, b))
    };
    let more_accurate = |a: &&PlanConfig, b: &&PlanConfig| {
        a.est_accuracy
            .total_cmp(&b.est_accuracy)
            .then(a.est_throughput.total_cmp(&b.est_throughput))
            .then_with(|| by_id(a, b))
    };
    let best: Option<&PlanConfig> = match constraint.kind {
        ConstraintKind::None => plans.iter().max_by(faster),
        ConstraintKind::MinThroughput => {
            plans.iter().filter(|p| p.est_throughput >= constraint.bound).max_by(more_accurate)
        }
        ConstraintKind::MinAccuracy => plans.iter().filter(|p| p.est_accuracy >= constraint.bound).max_by(faster),
    };
    best.cloned().ok_or_else(|| {
        let (kind, nearest) = match constraint.kind {
            ConstraintKind::MinThroughput => {
                ("throughput", plans.iter().map(|p| p.est_throughput).fold(f64::NEG_INFINITY, f64::max))
            }
            _ => ("accuracy", plans.iter().map(|p| p.est_accuracy).fold(f64::NEG_INFINITY, f64::max)),
        };
        PlannerError::Infeasible { kind, bound: constraint.bound, nearest }
    })
}

/// Per-op throughput on each device. `accel: None` marks a CPU-only op.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpProfile {
    pub cpu: f64,
    pub accel: Option<f64>,
}

/// Chooses the CPU/accelerator cut of a linear preprocessing chain.
///
/// Every split at or after the last CPU-only op is scored. The CPU side runs
/// its ops back to back, so its throughput is the harmonic composition of
/// theirs; the accelerator serializes its ops with the DNN, so
/// `1 / T = 1 / exec + sum(1 / accel_op)`. The split with the highest
/// `min(cpu, accelerator)` wins; ties keep more work on the CPU.
pub fn place_operators(
    graph: &PreprocGraph,
    profile: &[OpProfile],
    exec_throughput: f64,
) -> Result<PlacementSplit, PlannerError> {
    let n = graph.len();
    if n == 0 {
        return Err(PlannerError::EmptyGraph);
    }
    if profile.len() != n {
        return Err(PlannerError::ProfileMismatch { profiles: profile.len(), ops: n });
    }
    for (i, p) in profile.iter().enumerate() {
        let bad = |v: f64| !(v.is_finite() && v > 0.0);
        if bad(p.cpu) {
            return Err(PlannerError::BadThroughput { index: i, value: p.cpu });
        }
        if let Some(a) = p.accel.filter(|&a| bad(a)) {
            return Err(PlannerError::BadThroughput { index: i, value: a });
        }
    }
    let min_split = profile.iter().rposition(|p| p.accel.is_none()).map_or(0, |i| i + 1);
    let mut best: Option<PlacementSplit> = None;
    for split in min_split..=n {
        let cpu_cost: f64 = profile[..split].iter().map(|p| 1.0 / p.cpu).sum();
        let accel_cost: f64 = profile[split..].iter().map(|p| 1.0 / p.accel.expect("after last CPU-only op")).sum();
        let candidate = PlacementSplit {
            split_index: split,
            cpu_preproc_throughput: if cpu_cost == 0.0 { f64::INFINITY } else { 1.0 / cpu_cost },
            accel_overhead_throughput: 1.0 / (1.0 / exec_throughput + accel_cost),
        };
        let better = match &best {
            None => true,
            Some(b) => candidate.throughput().total_cmp(&b.throughput()) != Ordering::Less,
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one legal split"))
}

/// Cents per million images at `throughput` images per second on an
/// instance billed at `hourly_price` dollars per hour.
///
/// # Panics
///
/// Panics if `throughput` is not positive.
pub fn dollar_cost(throughput: f64, hourly_price: f64) -> f64 {
    assert!(throughput > 0.0, "throughput must be positive");
    100.0 * hourly_price * (1e6 / throughput) / 3600.0
}

/// Instance prices by vCPU count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePricing {
    points: Vec<(u32, f64)>,
}

impl InstancePricing {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self, PlannerError> {
        if points.len() < 2 {
            return Err(PlannerError::Pricing(format!("need at least two points, got {}", points.len())));
        }
        for (i, (v, p)) in points.iter().enumerate() {
            if !(p.is_finite() && *p >= 0.0) {
                return Err(PlannerError::Pricing(format!("price {p} for {v} vCPUs")));
            }
            if points[..i].iter().any(|(w, _)| w == v) {
                return Err(PlannerError::Pricing(format!("duplicate vCPU count {v}")));
            }
        }
        Ok(Self { points })
    }

    /// Reads CSV with the header `vcpus,hourly_usd`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, PlannerError> {
        #[derive(Deserialize)]
        struct Row {
            vcpus: u32,
            hourly_usd: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| PlannerError::Pricing(e.to_string()))?;
            points.push((row.vcpus, row.hourly_usd));
        }
        Self::new(points)
    }

    /// AWS g4dn on-demand prices (one T4 GPU) used for the cost tables.
    pub fn g4dn() -> Self {
        Self::new(vec![(4, 0.526), (8, 0.752), (16, 1.204), (32, 2.176), (64, 4.352)]).expect("valid table")
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    /// Hourly price of the instance with `vcpus` cores, if listed.
    pub fn price(&self, vcpus: u32) -> Option<f64> {
        self.points.iter().find(|(v, _)| *v == vcpus).map(|(_, p)| *p)
    }
}

/// Least-squares split of instance price into a fixed accelerator part and a
/// per-core part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceFit {
    pub per_core: f64,
    pub accelerator: f64,
    pub r_squared: f64,
}

/// Fits `price = accelerator + per_core * vcpus`.
pub fn fit_core_price(pricing: &InstancePricing) -> Result<PriceFit, PlannerError> {
    let pts = pricing.points();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|(x, _)| *x as f64).sum::<f64>() / n;
    let my = pts.iter().map(|(_, y)| *y).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|(x, _)| (*x as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PlannerError::DegenerateFit);
    }
    let sxy: f64 = pts.iter().map(|(x, y)| (*x as f64 - mx) * (y - my)).sum();
    let per_core = sxy / sxx;
    let accelerator = my - per_core * mx;
    let ss_tot: f64 = pts.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|(x, y)| (y - (accelerator + per_core * *x as f64)).powi(2)).sum();
    // A flat price list is fit exactly by the flat line.
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PriceFit { per_core, accelerator, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dagopt::{Normalization, PreprocOp};

    #[test]
    fn dollar_cost_examples() {
        assert!((dollar_cost(1927.0, 0.526) - 7.58).abs() < 0.005);
        assert!((dollar_cost(3756.0, 0.752) - 5.56).abs() < 0.005);
        assert!((dollar_cost(1e6, 3.6) - 0.1).abs() < 1e-12);
        assert_eq!(dollar_cost(200.0, 1.0), dollar_cost(100.0, 1.0) / 2.0);
    }

    #[test]
    fn price_fit() {
        let fit = fit_core_price(&InstancePricing::g4dn()).unwrap();
        assert!((fit.per_core - 0.0639).abs() < 5e-4);
        assert!((fit.accelerator - 0.218).abs() < 5e-3);
        assert!(fit.r_squared >= 0.995);

        let two = InstancePricing::new(vec![(2, 1.0), (4, 2.0)]).unwrap();
        let fit = fit_core_price(&two).unwrap();
        assert!((fit.per_core - 0.5).abs() < 1e-12 && fit.accelerator.abs() < 1e-12 && fit.r_squared == 1.0);

        let flat = InstancePricing::new(vec![(2, 1.5), (4, 1.5), (8, 1.5)]).unwrap();
        let fit = fit_core_price(&flat).unwrap();
        assert_eq!((fit.per_core, fit.accelerator), (0.0, 1.5));
        assert!(InstancePricing::new(vec![(2, 1.0), (2, 2.0)]).is_err());
    }

    #[test]
    fn pricing_csv() {
        let p = InstancePricing::from_csv("vcpus,hourly_usd\n4,0.526\n8,0.752\n".as_bytes()).unwrap();
        assert_eq!(p.points(), &[(4, 0.526), (8, 0.752)]);
        assert!(InstancePricing::from_csv("vcpus,hourly_usd\n4,abc\n".as_bytes()).is_err());
    }

    fn chain() -> PreprocGraph {
        PreprocGraph::new(
            300,
            300,
            3,
            vec![
                PreprocOp::Decode,
                PreprocOp::Resize { height: 224, width: 224, map: None },
                PreprocOp::Fused {
                    ops: vec![PreprocOp::ConvertDtype, PreprocOp::Normalize(Normalization::imagenet())],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn dnn_bound_keeps_everything_on_cpu() {
        // CPU chain sustains 5876 im/s; the DNN only 1844.
        let per_op = 3.0 * 5876.0;
        let profile = [
            OpProfile { cpu: per_op, accel: None },
            OpProfile { cpu: per_op, accel: Some(50_000.0) },
            OpProfile { cpu: per_op, accel: Some(50_000.0) },
        ];
        let s = place_operators(&chain(), &profile, 1844.0).unwrap();
        assert_eq!(s.split_index, 3);
        assert!((s.cpu_preproc_throughput - 5876.0).abs() < 1e-6);
        assert_eq!(s.accel_overhead_throughput, 1844.0);
    }

    #[test]
    fn preproc_bound_moves_ops_to_accelerator() {
        // Decode alone runs at 900; with resize and normalize the CPU side
        // drops to 534. Offloading both costs the executor 4999 -> 4500.
        let rest = 1.0 / (1.0 / 534.0 - 1.0 / 900.0);
        let accel_rest = 1.0 / (1.0 / 4500.0 - 1.0 / 4999.0);
        let profile = [
            OpProfile { cpu: 900.0, accel: None },
            OpProfile { cpu: 2.0 * rest, accel: Some(2.0 * accel_rest) },
            OpProfile { cpu: 2.0 * rest, accel: Some(2.0 * accel_rest) },
        ];
        let s = place_operators(&chain(), &profile, 4999.0).unwrap();
        assert_eq!(s.split_index, 1);
        assert!((s.cpu_preproc_throughput - 900.0).abs() < 1e-9);
        assert!((s.accel_overhead_throughput - 4500.0).abs() < 1e-6);
    }

    #[test]
    fn cpu_only_op_forces_split() {
        let g = PreprocGraph::new(8, 8, 3, vec![PreprocOp::Decode]).unwrap();
        let s = place_operators(&g, &[OpProfile { cpu: 100.0, accel: None }], 1e6).unwrap();
        assert_eq!(s.split_index, 1);
        assert_eq!(s.throughput(), 100.0);
        assert!(matches!(place_operators(&g, &[], 1.0), Err(PlannerError::ProfileMismatch { .. })));
    }
}

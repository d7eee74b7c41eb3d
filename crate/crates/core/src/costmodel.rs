//! End-to-end throughput estimators.
//!
//! Three ways of predicting how many images per second a configuration
//! sustains once preprocessing and DNN execution are both accounted for:
//!
//! * [`throughput_exec_only`] looks only at the DNN cascade and ignores
//!   preprocessing entirely.
//! * [`throughput_sum`] charges preprocessing and execution serially, so the
//!   per-image costs add.
//! * [`throughput_min`] assumes the two stages overlap in a pipeline, so the
//!   slower stage bounds the rate.
//!
//! The planner only ever uses the `min` estimator; the other two exist so the
//! CLI can reproduce comparisons against measured runs.
//!
//! Cascade stages carry `alpha`, the fraction of *original* inputs that reach
//! the stage. The first stage always sees every input, so its alpha is 1 and
//! alphas never increase along the cascade. Under that reading
//! `alpha / exec_throughput` is the per-input seconds spent in a stage, and the
//! stage costs simply add.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("cascade must contain at least one stage")]
    EmptyCascade,
    #[error("stage {stage}: execution throughput must be positive and finite, got {value}")]
    BadThroughput { stage: usize, value: f64 },
    #[error("stage {stage}: pass-through rate must lie in (0, 1], got {value}")]
    BadAlpha { stage: usize, value: f64 },
    #[error("first stage must see every input (alpha = 1), got {0}")]
    FirstAlphaNotOne(f64),
    #[error("stage {stage}: alpha {value} exceeds the previous stage's alpha {previous}")]
    IncreasingAlpha { stage: usize, value: f64, previous: f64 },
}

/// One model in a cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    /// Images per second the model executes at in isolation.
    pub exec_throughput: f64,
    /// Fraction of original inputs that reach this stage.
    pub alpha: f64,
}

/// A validated, ordered cascade of models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CascadeStage>", into = "Vec<CascadeStage>")]
pub struct CascadeSpec {
    stages: Vec<CascadeStage>,
}

impl CascadeSpec {
    pub fn new(stages: Vec<CascadeStage>) -> Result<Self, CostModelError> {
        if stages.is_empty() {
            return Err(CostModelError::EmptyCascade);
        }
        let mut previous = 1.0;
        for (i, s) in stages.iter().enumerate() {
            if !(s.exec_throughput.is_finite() && s.exec_throughput > 0.0) {
                return Err(CostModelError::BadThroughput { stage: i, value: s.exec_throughput });
            }
            if !(s.alpha > 0.0 && s.alpha <= 1.0) {
                return Err(CostModelError::BadAlpha { stage: i, value: s.alpha });
            }
            if i == 0 && s.alpha != 1.0 {
                return Err(CostModelError::FirstAlphaNotOne(s.alpha));
            }
            if s.alpha > previous {
                return Err(CostModelError::IncreasingAlpha { stage: i, value: s.alpha, previous });
            }
            previous = s.alpha;
        }
        Ok(Self { stages })
    }

    /// A cascade of one model that sees every input.
    pub fn single(exec_throughput: f64) -> Result<Self, CostModelError> {
        Self::new(vec![CascadeStage { exec_throughput, alpha: 1.0 }])
    }

    /// Builds a cascade from per-model throughputs and per-model pass rates.
    ///
    /// `pass_rates[j]` is the conditional fraction of stage `j`'s inputs that
    /// it forwards. The cumulative reach fraction of stage `j` is the product
    /// of the pass rates of every earlier stage; the last model's own pass rate
    /// does not affect the cascade.
    pub fn from_pass_rates(models: &[(f64, f64)]) -> Result<Self, CostModelError> {
        let mut reach = 1.0;
        let mut stages = Vec::with_capacity(models.len());
        for (i, &(exec_throughput, pass)) in models.iter().enumerate() {
            if !(pass > 0.0 && pass <= 1.0) {
                return Err(CostModelError::BadAlpha { stage: i, value: pass });
            }
            stages.push(CascadeStage { exec_throughput, alpha: reach });
            reach *= pass;
        }
        Self::new(stages)
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

impl TryFrom<Vec<CascadeStage>> for CascadeSpec {
    type Error = CostModelError;

    fn try_from(stages: Vec<CascadeStage>) -> Result<Self, Self::Error> {
        Self::new(stages)
    }
}

impl From<CascadeSpec> for Vec<CascadeStage> {
    fn from(c: CascadeSpec) -> Self {
        c.stages
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModel {
    ExecOnly,
    Sum,
    Min,
}

impl CostModel {
    pub const ALL: [CostModel; 3] = [CostModel::Min, CostModel::ExecOnly, CostModel::Sum];

    pub fn name(self) -> &'static str {
        match self {
            CostModel::ExecOnly => "exec-only",
            CostModel::Sum => "sum",
            CostModel::Min => "min",
        }
    }

    pub fn estimate(self, preproc: f64, cascade: &CascadeSpec) -> ThroughputEstimate {
        match self {
            CostModel::ExecOnly => throughput_exec_only(cascade),
            CostModel::Sum => throughput_sum(preproc, cascade),
            CostModel::Min => throughput_min(preproc, cascade),
        }
    }
}

/// An estimated end-to-end throughput, in images per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEstimate {
    pub value: f64,
    pub model: CostModel,
}

impl ThroughputEstimate {
    /// The estimate rounded to whole images per second.
    pub fn rounded(&self) -> i64 {
        self.value.round() as i64
    }
}

/// Cascade throughput with preprocessing treated as free.
pub fn throughput_exec_only(cascade: &CascadeSpec) -> ThroughputEstimate {
    let seconds_per_input: f64 = cascade.stages.iter().map(|s| s.alpha / s.exec_throughput).sum();
    ThroughputEstimate { value: 1.0 / seconds_per_input, model: CostModel::ExecOnly }
}

/// Preprocessing and execution run back to back with no overlap.
///
/// # Panics
///
/// Panics if `preproc` is not a positive number.
pub fn throughput_sum(preproc: f64, cascade: &CascadeSpec) -> ThroughputEstimate {
    assert!(preproc > 0.0, "preprocessing throughput must be positive");
    let exec = throughput_exec_only(cascade).value;
    ThroughputEstimate { value: 1.0 / (1.0 / preproc + 1.0 / exec), model: CostModel::Sum }
}

/// Preprocessing pipelined with execution: the slower stage wins.
///
/// # Panics
///
/// Panics if `preproc` is not a positive number.
pub fn throughput_min(preproc: f64, cascade: &CascadeSpec) -> ThroughputEstimate {
    assert!(preproc > 0.0, "preprocessing throughput must be positive");
    let exec = throughput_exec_only(cascade).value;
    ThroughputEstimate { value: preproc.min(exec), model: CostModel::Min }
}

/// Relative estimation error in percent of the measured throughput.
pub fn estimation_error(estimate: f64, measured: f64) -> f64 {
    assert!(measured > 0.0, "measured throughput must be positive");
    100.0 * (estimate - measured).abs() / measured
}

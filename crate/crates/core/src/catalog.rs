//! Planner inputs: DNN profiles, input formats and calibration data.
//!
//! A catalog is a JSON document:
//!
//! ```json
//! {
//!   "dnns": [
//!     {"name": "resnet50", "exec_throughput": 4513, "input_resolution": [224, 224],
//!      "passthrough": 1.0, "accuracy_by_format": {"full": 0.7516}}
//!   ],
//!   "formats": [
//!     {"name": "full", "codec": "jpeg", "short_side": 256, "quality": 90,
//!      "preproc_throughput": 527, "lossless": false}
//!   ],
//!   "cascades": [["resnet18", "resnet50"]],
//!   "calibration_path": "calibration.csv"
//! }
//! ```
//!
//! `cascades` and `calibration_path` are optional. A relative calibration
//! path is resolved against the catalog file's directory. The calibration
//! file is CSV with the header `item_id,label,<plan-id>...`, one row per
//! validation item and one prediction column per plan.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{throughput_min, CascadeSpec};
use crate::dagopt::{optimize, Normalization, PreprocGraph};
use crate::planner::{PlacementSplit, PlanConfig};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing catalog: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("catalog must contain at least one DNN")]
    NoDnns,
    #[error("catalog must contain at least one input format")]
    NoFormats,
    #[error("{field} = {value} is invalid: {reason}")]
    Invalid { field: String, value: String, reason: &'static str },
    #[error("duplicate {kind} name {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("cascade {index} references unknown DNN {name:?}")]
    UnknownDnn { index: usize, name: String },
    #[error("DNN {dnn:?} has no accuracy for format {format:?}")]
    MissingAccuracy { dnn: String, format: String },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("calibration has no predictions for plan {0:?}")]
    MissingPredictions(String),
    #[error("pass-through estimate needs at least one score")]
    EmptyScores,
}

fn invalid(field: impl Into<String>, value: impl fmt::Display, reason: &'static str) -> CatalogError {
    CatalogError::Invalid { field: field.into(), value: value.to_string(), reason }
}

fn default_passthrough() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnProfile {
    pub name: String,
    /// Images per second at the profiled batch size.
    pub exec_throughput: f64,
    /// Model input as `[height, width]`.
    pub input_resolution: [u32; 2],
    /// Fraction of this model's inputs it forwards to the next cascade stage.
    /// Terminal models use 1.
    #[serde(default = "default_passthrough")]
    pub passthrough: f64,
    pub accuracy_by_format: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Codec {
    Jpeg,
    /// Any codec the built-in decoder does not handle, by name.
    Other(String),
}

impl From<String> for Codec {
    fn from(s: String) -> Self {
        if s.eq_ignore_ascii_case("jpeg") || s.eq_ignore_ascii_case("jpg") {
            Codec::Jpeg
        } else {
            Codec::Other(s.to_ascii_lowercase())
        }
    }
}

impl From<Codec> for String {
    fn from(c: Codec) -> Self {
        match c {
            Codec::Jpeg => "jpeg".into(),
            Codec::Other(s) => s,
        }
    }
}

impl Serialize for Codec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from(self.clone()))
    }
}

impl<'de> Deserialize<'de> for Codec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(Codec::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFormat {
    pub name: String,
    pub codec: Codec,
    pub short_side: u32,
    /// Long side in pixels; square images are assumed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_side: Option<u32>,
    #[serde(default)]
    pub quality: Option<u32>,
    /// Measured preprocessing throughput, images per second.
    pub preproc_throughput: f64,
    #[serde(default)]
    pub lossless: bool,
}

impl InputFormat {
    /// Stored image size as `(height, width)`, landscape when not square.
    pub fn dimensions(&self) -> (u32, u32) {
        (self.short_side, self.long_side.unwrap_or(self.short_side))
    }
}

/// Ground-truth labels of validation items and each plan's predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    /// `(item id, label)` pairs.
    pub items: Vec<(String, String)>,
    pub predictions_by_plan: BTreeMap<String, Vec<String>>,
}

impl CalibrationSet {
    pub fn new(
        items: Vec<(String, String)>,
        predictions_by_plan: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, CatalogError> {
        for (plan, preds) in &predictions_by_plan {
            if preds.len() != items.len() {
                return Err(CatalogError::Calibration(format!(
                    "plan {plan:?} has {} predictions for {} items",
                    preds.len(),
                    items.len()
                )));
            }
        }
        Ok(Self { items, predictions_by_plan })
    }

    /// Parses the `item_id,label,<plan-id>...` CSV layout.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CatalogError> {
        let cal_err = |e: csv::Error| CatalogError::Calibration(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(cal_err)?.clone();
        if headers.len() < 2 || &headers[0] != "item_id" || &headers[1] != "label" {
            return Err(CatalogError::Calibration("header must start with item_id,label".into()));
        }
        let plans: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut seen = HashSet::new();
        for p in &plans {
            if !seen.insert(p) {
                return Err(CatalogError::Duplicate { kind: "calibration plan", name: p.clone() });
            }
        }
        let mut items = Vec::new();
        let mut preds: Vec<Vec<String>> = vec![Vec::new(); plans.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(cal_err)?;
            items.push((rec[0].to_string(), rec[1].to_string()));
            for (i, col) in preds.iter_mut().enumerate() {
                col.push(rec[i + 2].to_string());
            }
        }
        Self::new(items, plans.into_iter().zip(preds).collect())
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let f = std::fs::File::open(path).map_err(|source| CatalogError::Io { path: path.into(), source })?;
        Self::from_csv(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub dnns: Vec<DnnProfile>,
    pub formats: Vec<InputFormat>,
    /// Ordered DNN names; the last model is the target.
    #[serde(default)]
    pub cascades: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_path: Option<PathBuf>,
    #[serde(skip)]
    pub calibration: Option<CalibrationSet>,
}

impl Catalog {
    /// Builds a catalog and checks every invariant.
    pub fn new(
        dnns: Vec<DnnProfile>,
        formats: Vec<InputFormat>,
        cascades: Vec<Vec<String>>,
        calibration: Option<CalibrationSet>,
    ) -> Result<Self, CatalogError> {
        let c = Self { dnns, formats, cascades, calibration_path: None, calibration };
        c.validate()?;
        Ok(c)
    }

    /// Parses a catalog document. `base` resolves a relative calibration path.
    pub fn from_json(json: &str, base: Option<&Path>) -> Result<Self, CatalogError> {
        let mut c: Catalog = serde_json::from_str(json)?;
        if let Some(p) = &c.calibration_path {
            let path = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            };
            c.calibration = Some(CalibrationSet::load(&path)?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn dnn(&self, name: &str) -> Option<&DnnProfile> {
        self.dnns.iter().find(|d| d.name == name)
    }

    pub fn format(&self, name: &str) -> Option<&InputFormat> {
        self.formats.iter().find(|f| f.name == name)
    }

    fn validate(&self) -> Result<(), CatalogError> {
        if self.dnns.is_empty() {
            return Err(CatalogError::NoDnns);
        }
        if self.formats.is_empty() {
            return Err(CatalogError::NoFormats);
        }
        let mut names = HashSet::new();
        for d in &self.dnns {
            if !names.insert(d.name.as_str()) {
                return Err(CatalogError::Duplicate { kind: "DNN", name: d.name.clone() });
            }
            let field = |f: &str| format!("dnns[{}].{f}", d.name);
            if !(d.exec_throughput.is_finite() && d.exec_throughput > 0.0) {
                return Err(invalid(field("exec_throughput"), d.exec_throughput, "must be positive"));
            }
            if !(d.passthrough > 0.0 && d.passthrough <= 1.0) {
                return Err(invalid(field("passthrough"), d.passthrough, "must lie in (0, 1]"));
            }
            if d.input_resolution.contains(&0) {
                return Err(invalid(
                    field("input_resolution"),
                    format!("{:?}", d.input_resolution),
                    "must be positive",
                ));
            }
            for (fmt, &acc) in &d.accuracy_by_format {
                if !(0.0..=1.0).contains(&acc) {
                    return Err(invalid(field(&format!("accuracy_by_format.{fmt}")), acc, "must lie in [0, 1]"));
                }
            }
        }
        let mut names = HashSet::new();
        for f in &self.formats {
            if !names.insert(f.name.as_str()) {
                return Err(CatalogError::Duplicate { kind: "format", name: f.name.clone() });
            }
            let field = |x: &str| format!("formats[{}].{x}", f.name);
            if !(f.preproc_throughput.is_finite() && f.preproc_throughput > 0.0) {
                return Err(invalid(field("preproc_throughput"), f.preproc_throughput, "must be positive"));
            }
            if f.short_side == 0 {
                return Err(invalid(field("short_side"), 0, "must be positive"));
            }
            if matches!(f.long_side, Some(l) if l < f.short_side) {
                return Err(invalid(field("long_side"), f.long_side.unwrap_or(0), "must be at least short_side"));
            }
        }
        for d in &self.dnns {
            for f in &self.formats {
                if !d.accuracy_by_format.contains_key(&f.name) {
                    return Err(CatalogError::MissingAccuracy { dnn: d.name.clone(), format: f.name.clone() });
                }
            }
        }
        for (i, cascade) in self.cascades.iter().enumerate() {
            if cascade.is_empty() {
                return Err(invalid(format!("cascades[{i}]"), "[]", "must name at least one DNN"));
            }
            for name in cascade {
                if self.dnn(name).is_none() {
                    return Err(CatalogError::UnknownDnn { index: i, name: name.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a catalog file.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|source| CatalogError::Io { path: path.into(), source })?;
    Catalog::from_json(&json, path.parent())
}

/// Plan id for a cascade on a format, e.g. `resnet18+resnet50@full`.
pub fn plan_id(dnns: &[&str], format: &str) -> String {
    format!("{}@{format}", dnns.join("+"))
}

/// One plan per single DNN and format, then one per declared cascade and
/// format.
///
/// Each plan carries the optimized preprocessing plan for its model input,
/// all preprocessing placed on the CPU, the `min` throughput estimate, and an
/// accuracy taken from calibration predictions when the catalog has them for
/// the plan id, otherwise from the profile (the target model's profile for
/// cascades).
pub fn generate_plans(catalog: &Catalog) -> Vec<PlanConfig> {
    let mut chains: Vec<Vec<&DnnProfile>> = catalog.dnns.iter().map(|d| vec![d]).collect();
    for cascade in &catalog.cascades {
        chains.push(cascade.iter().map(|n| catalog.dnn(n).expect("validated cascade")).collect());
    }
    let mut plans = Vec::with_capacity(chains.len() * catalog.formats.len());
    for chain in &chains {
        for format in &catalog.formats {
            plans.push(build_plan(chain, format, catalog.calibration.as_ref()));
        }
    }
    plans
}

fn build_plan(chain: &[&DnnProfile], format: &InputFormat, cal: Option<&CalibrationSet>) -> PlanConfig {
    let names: Vec<&str> = chain.iter().map(|d| d.name.as_str()).collect();
    let id = plan_id(&names, &format.name);
    let rates: Vec<(f64, f64)> = chain.iter().map(|d| (d.exec_throughput, d.passthrough)).collect();
    let cascade = CascadeSpec::from_pass_rates(&rates).expect("validated profiles");
    let target = chain.last().expect("non-empty chain");
    let preproc_plan = preprocessing_plan(format, target.input_resolution);
    let est_throughput = throughput_min(format.preproc_throughput, &cascade).value;
    let est_accuracy =
        cal.and_then(|c| accuracy_from(c, &id).ok()).unwrap_or_else(|| target.accuracy_by_format[&format.name]);
    let placement = PlacementSplit {
        split_index: preproc_plan.len(),
        cpu_preproc_throughput: format.preproc_throughput,
        accel_overhead_throughput: crate::costmodel::throughput_exec_only(&cascade).value,
    };
    PlanConfig {
        id,
        format: format.clone(),
        dnns: chain.iter().map(|d| (*d).clone()).collect(),
        cascade,
        preproc_plan,
        placement,
        est_throughput,
        est_accuracy,
    }
}

/// Optimized resize-crop-normalize plan taking a stored image of `format` to
/// a model input of `resolution`. The resize targets the usual 256/224 ratio
/// of the crop.
pub fn preprocessing_plan(format: &InputFormat, resolution: [u32; 2]) -> PreprocGraph {
    let (h, w) = format.dimensions();
    preprocessing_plan_for(h, w, resolution)
}

/// [`preprocessing_plan`] for a stored image of `height x width`.
pub fn preprocessing_plan_for(h: u32, w: u32, resolution: [u32; 2]) -> PreprocGraph {
    let crop = resolution[0].min(resolution[1]);
    let short = (crop as u64 * 256).div_ceil(224) as u32;
    let g = PreprocGraph::canonical(h, w, short, crop, Normalization::imagenet()).expect("positive dimensions");
    optimize(&g)
}

fn accuracy_from(cal: &CalibrationSet, plan: &str) -> Result<f64, CatalogError> {
    let preds = cal.predictions_by_plan.get(plan).ok_or_else(|| CatalogError::MissingPredictions(plan.into()))?;
    if cal.items.is_empty() {
        return Err(CatalogError::Calibration("no calibration items".into()));
    }
    let correct = cal.items.iter().zip(preds).filter(|((_, label), p)| label == *p).count();
    Ok(correct as f64 / cal.items.len() as f64)
}

/// Fraction of calibration items the plan labels correctly.
pub fn estimate_accuracy(plan: &PlanConfig, cal: &CalibrationSet) -> Result<f64, CatalogError> {
    accuracy_from(cal, &plan.id)
}

/// Fraction of `scores` at or above `threshold`.
pub fn estimate_passthrough(scores: &[f64], threshold: f64) -> Result<f64, CatalogError> {
    if scores.is_empty() {
        return Err(CatalogError::EmptyScores);
    }
    Ok(scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dnn(name: &str, t: f64, acc: &[(&str, f64)]) -> DnnProfile {
        DnnProfile {
            name: name.into(),
            exec_throughput: t,
            input_resolution: [224, 224],
            passthrough: 1.0,
            accuracy_by_format: acc.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn format(name: &str, t: f64) -> InputFormat {
        InputFormat {
            name: name.into(),
            codec: Codec::Jpeg,
            short_side: 256,
            long_side: None,
            quality: Some(90),
            preproc_throughput: t,
            lossless: false,
        }
    }

    #[test]
    fn cross_product_size() {
        let accs = [("a", 0.7), ("b", 0.6)];
        let c = Catalog::new(
            vec![dnn("r18", 12592.0, &accs), dnn("r34", 6860.0, &accs), dnn("r50", 4513.0, &accs)],
            vec![format("a", 500.0), format("b", 900.0)],
            vec![],
            None,
        )
        .unwrap();
        assert_eq!(generate_plans(&c).len(), 6);
    }

    #[test]
    fn rejects_bad_values() {
        let accs = [("a", 1.2)];
        let e = Catalog::new(vec![dnn("r18", 1.0, &accs)], vec![format("a", 1.0)], vec![], None).unwrap_err();
        assert!(matches!(e, CatalogError::Invalid { .. }), "{e}");
        let e = Catalog::new(vec![], vec![format("a", 1.0)], vec![], None).unwrap_err();
        assert_eq!(e.to_string(), "catalog must contain at least one DNN");
        let accs = [("a", 0.5)];
        let e = Catalog::new(vec![dnn("x", 1.0, &accs), dnn("x", 2.0, &accs)], vec![format("a", 1.0)], vec![], None)
            .unwrap_err();
        assert!(matches!(e, CatalogError::Duplicate { .. }));
    }

    #[test]
    fn passthrough_counts() {
        let scores: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        assert_eq!(estimate_passthrough(&scores, 0.9).unwrap(), 0.1);
        assert_eq!(estimate_passthrough(&scores, 2.0).unwrap(), 0.0);
        assert!(estimate_passthrough(&[], 0.5).is_err());
    }

    #[test]
    fn calibration_csv() {
        let csv = "item_id,label,r50@a,r18@a\n1,cat,cat,dog\n2,dog,dog,dog\n3,cat,dog,dog\n";
        let cal = CalibrationSet::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(cal.items.len(), 3);
        let accs = [("a", 0.1)];
        let c = Catalog::new(vec![dnn("r50", 10.0, &accs)], vec![format("a", 5.0)], vec![], Some(cal.clone())).unwrap();
        let plans = generate_plans(&c);
        assert!((plans[0].est_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((estimate_accuracy(&plans[0], &cal).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(CalibrationSet::from_csv("item_id,label,p\n1,a\n".as_bytes()).is_err());
    }
}

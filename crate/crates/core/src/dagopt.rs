//! Preprocessing plan optimizer.
//!
//! A preprocessing pipeline is a linear chain of operations that starts with
//! a decode and ends in a model-ready tensor. The optimizer works in three
//! passes:
//!
//! 1. [`enumerate_orderings`] produces every plan reachable through the
//!    reordering rules: dtype conversion and normalization may sit anywhere
//!    after the decode, a resize followed by a crop may be swapped into a
//!    crop followed by a resize, and any contiguous run of elementwise ops
//!    (conversion, normalization, channel reorder) may be fused.
//! 2. [`prune_plans`] drops plans that another candidate beats on one of the
//!    pruning rules (fewer resize pixels, narrower resize dtype, fused
//!    instead of unfused) without being worse anywhere else.
//! 3. [`optimize`] picks the cheapest survivor by [`plan_cost`], a weighted
//!    count of arithmetic operations.
//!
//! Costs use a fixed table of operations per output element, scaled by the
//! byte width of the widest dtype the op touches:
//!
//! | op              | ops / element |
//! |-----------------|---------------|
//! | bilinear resize | 8             |
//! | convert dtype   | 1             |
//! | normalize       | 3             |
//! | channel reorder | 1             |
//! | crop            | 0             |
//! | decode          | 0 (common to every plan) |

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DagError {
    #[error("preprocessing graph is empty")]
    Empty,
    #[error("decode must be the first and only decode op (found at position {0})")]
    DecodePosition(usize),
    #[error("op {index} ({op}): {reason}")]
    Incompatible { index: usize, op: String, reason: String },
    #[error("fused op may only contain convert, normalize and channel reorder, found {0}")]
    BadFusion(String),
    #[error("source shape must be positive, got {0}x{1}x{2}")]
    BadSource(u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    /// Byte width, also used as the cost weight.
    pub fn width(self) -> u64 {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Hwc,
    Chw,
}

/// Shape, dtype and memory layout of a tensor flowing between ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub dtype: Dtype,
    pub layout: Layout,
}

impl TensorShape {
    pub fn image(height: u32, width: u32, channels: u32) -> Self {
        Self { height, width, channels, dtype: Dtype::U8, layout: Layout::Hwc }
    }

    pub fn pixels(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn elements(&self) -> u64 {
        self.pixels() * self.channels as u64
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{} {:?} {:?}", self.height, self.width, self.channels, self.dtype, self.layout)
    }
}

/// `y = (x * scale - mean[c]) / std[c]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// The usual ImageNet statistics on a [0, 1] scale.
    pub fn imagenet() -> Self {
        Self { scale: 1.0 / 255.0, mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }

    #[inline]
    pub fn apply(&self, value: f32, channel: usize) -> f32 {
        (value * self.scale - self.mean[channel]) / self.std[channel]
    }
}

/// Explicit sampling grid for a resize: output coordinate `x` reads input
/// coordinate `(x + 0.5) * scale - 0.5 + offset`.
///
/// A crop moved in front of a resize keeps the sampling grid of the original
/// resize through this map, so both orders read the same source positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleMap {
    pub scale_y: f64,
    pub scale_x: f64,
    pub offset_y: f64,
    pub offset_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PreprocOp {
    Decode,
    Resize {
        height: u32,
        width: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<ResampleMap>,
    },
    Crop {
        top: u32,
        left: u32,
        height: u32,
        width: u32,
    },
    ConvertDtype,
    Normalize(Normalization),
    ChannelReorder,
    Fused {
        ops: Vec<PreprocOp>,
    },
}

impl PreprocOp {
    pub fn name(&self) -> String {
        match self {
            PreprocOp::Decode => "decode".into(),
            PreprocOp::Resize { .. } => "resize".into(),
            PreprocOp::Crop { .. } => "crop".into(),
            PreprocOp::ConvertDtype => "convert".into(),
            PreprocOp::Normalize(_) => "normalize".into(),
            PreprocOp::ChannelReorder => "reorder".into(),
            PreprocOp::Fused { ops } => {
                let names: Vec<String> = ops.iter().map(|o| o.name()).collect();
                format!("fused({})", names.join("+"))
            }
        }
    }

    /// Convert, normalize and channel reorder are pointwise and may be fused.
    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            PreprocOp::ConvertDtype | PreprocOp::Normalize(_) | PreprocOp::ChannelReorder | PreprocOp::Fused { .. }
        )
    }

    fn is_movable(&self) -> bool {
        matches!(self, PreprocOp::ConvertDtype | PreprocOp::Normalize(_))
    }

    /// Output shape for a given input shape, or why the op cannot run on it.
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape, String> {
        match self {
            PreprocOp::Decode => Ok(input),
            PreprocOp::Resize { height, width, .. } => {
                if input.layout != Layout::Hwc {
                    return Err("resize needs HWC input".into());
                }
                if *height == 0 || *width == 0 {
                    return Err("resize target must be positive".into());
                }
                Ok(TensorShape { height: *height, width: *width, ..input })
            }
            PreprocOp::Crop { top, left, height, width } => {
                if input.layout != Layout::Hwc {
                    return Err("crop needs HWC input".into());
                }
                if *height == 0 || *width == 0 {
                    return Err("crop window must be non-empty".into());
                }
                if top + height > input.height || left + width > input.width {
                    return Err(format!(
                        "crop window {}x{}+{}+{} exceeds input {}x{}",
                        height, width, top, left, input.height, input.width
                    ));
                }
                Ok(TensorShape { height: *height, width: *width, ..input })
            }
            PreprocOp::ConvertDtype => {
                if input.dtype != Dtype::U8 {
                    return Err("convert expects u8 input".into());
                }
                Ok(TensorShape { dtype: Dtype::F32, ..input })
            }
            PreprocOp::Normalize(_) => {
                if input.dtype != Dtype::F32 {
                    return Err("normalize expects f32 input".into());
                }
                if input.channels != 3 {
                    return Err("normalize expects 3 channels".into());
                }
                Ok(input)
            }
            PreprocOp::ChannelReorder => {
                if input.layout != Layout::Hwc {
                    return Err("channel reorder expects HWC input".into());
                }
                Ok(TensorShape { layout: Layout::Chw, ..input })
            }
            PreprocOp::Fused { ops } => {
                let mut shape = input;
                for op in ops {
                    shape = op.output_shape(shape)?;
                }
                Ok(shape)
            }
        }
    }

    fn cost(&self, input: TensorShape, output: TensorShape) -> u64 {
        let widest = input.dtype.width().max(output.dtype.width());
        match self {
            PreprocOp::Decode | PreprocOp::Crop { .. } => 0,
            PreprocOp::Resize { .. } => 8 * output.elements() * output.dtype.width(),
            PreprocOp::ConvertDtype => output.elements() * widest,
            PreprocOp::Normalize(_) => 3 * output.elements() * widest,
            PreprocOp::ChannelReorder => output.elements() * widest,
            PreprocOp::Fused { ops } => {
                let mut shape = input;
                let mut total = 0;
                for op in ops {
                    let next = op.output_shape(shape).expect("validated graph");
                    total += op.cost(shape, next);
                    shape = next;
                }
                total
            }
        }
    }
}

/// One op annotated with the shapes around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocStep {
    #[serde(flatten)]
    pub op: PreprocOp,
    pub input: TensorShape,
    pub output: TensorShape,
}

/// A validated linear preprocessing plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocGraph {
    source: TensorShape,
    steps: Vec<PreprocStep>,
}

#[derive(Deserialize)]
struct GraphDoc {
    source: TensorShape,
    steps: Vec<StepDoc>,
}

#[derive(Deserialize)]
struct StepDoc {
    #[serde(flatten)]
    op: PreprocOp,
}

impl<'de> Deserialize<'de> for PreprocGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GraphDoc::deserialize(d)?;
        let ops = doc.steps.into_iter().map(|s| s.op).collect();
        PreprocGraph::new(doc.source.height, doc.source.width, doc.source.channels, ops)
            .map_err(serde::de::Error::custom)
    }
}

impl PreprocGraph {
    /// Validates `ops` against a decoded source of `height x width x channels`
    /// u8 pixels and annotates every op with its input and output shapes.
    pub fn new(height: u32, width: u32, channels: u32, ops: Vec<PreprocOp>) -> Result<Self, DagError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DagError::BadSource(height, width, channels));
        }
        if ops.is_empty() {
            return Err(DagError::Empty);
        }
        let source = TensorShape::image(height, width, channels);
        let mut steps = Vec::with_capacity(ops.len());
        let mut shape = source;
        for (index, op) in ops.into_iter().enumerate() {
            match (&op, index) {
                (PreprocOp::Decode, 0) => {}
                (PreprocOp::Decode, i) => return Err(DagError::DecodePosition(i)),
                (_, 0) => return Err(DagError::DecodePosition(usize::MAX)),
                _ => {}
            }
            if let PreprocOp::Fused { ops: members } = &op {
                if let Some(bad) = members.iter().find(|m| !m.is_elementwise() || matches!(m, PreprocOp::Fused { .. }))
                {
                    return Err(DagError::BadFusion(bad.name()));
                }
            }
            let output =
                op.output_shape(shape).map_err(|reason| DagError::Incompatible { index, op: op.name(), reason })?;
            steps.push(PreprocStep { op, input: shape, output });
            shape = output;
        }
        Ok(Self { source, steps })
    }

    /// The standard classification pipeline: resize the short side to
    /// `resize_short`, center crop `crop x crop`, convert to f32, normalize,
    /// and reorder to channels-first.
    pub fn canonical(
        height: u32,
        width: u32,
        resize_short: u32,
        crop: u32,
        norm: Normalization,
    ) -> Result<Self, DagError> {
        let (rh, rw) = short_side_resize(height, width, resize_short);
        let crop = crop.min(rh).min(rw);
        let ops = vec![
            PreprocOp::Decode,
            PreprocOp::Resize { height: rh, width: rw, map: None },
            PreprocOp::Crop { top: (rh - crop) / 2, left: (rw - crop) / 2, height: crop, width: crop },
            PreprocOp::ConvertDtype,
            PreprocOp::Normalize(norm),
            PreprocOp::ChannelReorder,
        ];
        Self::new(height, width, 3, ops)
    }

    pub fn source(&self) -> TensorShape {
        self.source
    }

    pub fn steps(&self) -> &[PreprocStep] {
        &self.steps
    }

    pub fn ops(&self) -> impl Iterator<Item = &PreprocOp> {
        self.steps.iter().map(|s| &s.op)
    }

    pub fn output(&self) -> TensorShape {
        self.steps.last().map(|s| s.output).unwrap_or(self.source)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True when the output is an f32 channels-first tensor a model can take.
    pub fn is_model_ready(&self) -> bool {
        let out = self.output();
        out.dtype == Dtype::F32 && out.layout == Layout::Chw
    }

    fn rebuild(&self, ops: Vec<PreprocOp>) -> Result<Self, DagError> {
        Self::new(self.source.height, self.source.width, self.source.channels, ops)
    }

    /// Compact one-line rendering, e.g. `decode > crop > resize[u8] > fused(...)`.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| match s.op {
                PreprocOp::Resize { .. } => format!("resize[{:?}]", s.input.dtype).to_lowercase(),
                _ => s.op.name(),
            })
            .collect();
        parts.join(" > ")
    }

    fn sort_key(&self) -> String {
        serde_json::to_string(&self.steps).expect("graph serializes")
    }

    /// The input of the resize op, if the plan has one.
    pub fn resize_input(&self) -> Option<TensorShape> {
        self.steps.iter().find(|s| matches!(s.op, PreprocOp::Resize { .. })).map(|s| s.input)
    }

    /// Adjacent elementwise ops that were left as separate passes.
    pub fn unfused_adjacencies(&self) -> usize {
        self.steps.windows(2).filter(|w| w[0].op.is_elementwise() && w[1].op.is_elementwise()).count()
    }
}

/// Target size when the short side is scaled to `short` with the aspect ratio
/// kept. The long side is truncated, as common image libraries do.
pub fn short_side_resize(height: u32, width: u32, short: u32) -> (u32, u32) {
    if height <= width {
        let w = ((width as u64 * short as u64) / height as u64).max(1) as u32;
        (short, w)
    } else {
        let h = ((height as u64 * short as u64) / width as u64).max(1) as u32;
        (h, short)
    }
}

/// Weighted arithmetic-op count of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanCost {
    pub arithmetic_ops: u64,
}

pub fn plan_cost(graph: &PreprocGraph) -> PlanCost {
    PlanCost { arithmetic_ops: graph.steps.iter().map(|s| s.op.cost(s.input, s.output)).sum() }
}

fn resize_cost(graph: &PreprocGraph) -> u64 {
    graph.steps.iter().filter(|s| matches!(s.op, PreprocOp::Resize { .. })).map(|s| s.op.cost(s.input, s.output)).sum()
}

/// Rewrites `Resize -> Crop` into `Crop -> Resize`, with the crop window
/// mapped into source coordinates (floored start, ceiled end) and the resize
/// sampling grid carried over so the result reads the same source positions.
fn swap_resize_crop(input: TensorShape, resize: &PreprocOp, crop: &PreprocOp) -> Option<(PreprocOp, PreprocOp)> {
    let (PreprocOp::Resize { height: rh, width: rw, map: None }, PreprocOp::Crop { top, left, height, width }) =
        (resize, crop)
    else {
        return None;
    };
    let sy = input.height as f64 / *rh as f64;
    let sx = input.width as f64 / *rw as f64;
    let y0 = (*top as f64 * sy).floor() as u32;
    let x0 = (*left as f64 * sx).floor() as u32;
    let y1 = (((*top + *height) as f64 * sy).ceil() as u32).min(input.height);
    let x1 = (((*left + *width) as f64 * sx).ceil() as u32).min(input.width);
    let new_crop = PreprocOp::Crop { top: y0, left: x0, height: y1 - y0, width: x1 - x0 };
    let new_resize = PreprocOp::Resize {
        height: *height,
        width: *width,
        map: Some(ResampleMap {
            scale_y: sy,
            scale_x: sx,
            offset_y: *top as f64 * sy - y0 as f64,
            offset_x: *left as f64 * sx - x0 as f64,
        }),
    };
    Some((new_crop, new_resize))
}

fn flatten(ops: impl Iterator<Item = PreprocOp>) -> Vec<PreprocOp> {
    let mut out = Vec::new();
    for op in ops {
        match op {
            PreprocOp::Fused { ops } => out.extend(flatten(ops.into_iter())),
            other => out.push(other),
        }
    }
    out
}

/// Every way of grouping maximal elementwise runs into fused ops.
fn fusion_variants(ops: &[PreprocOp]) -> Vec<Vec<PreprocOp>> {
    let mut variants: Vec<Vec<PreprocOp>> = vec![Vec::new()];
    let mut i = 0;
    while i < ops.len() {
        if !ops[i].is_elementwise() {
            for v in &mut variants {
                v.push(ops[i].clone());
            }
            i += 1;
            continue;
        }
        let start = i;
        while i < ops.len() && ops[i].is_elementwise() {
            i += 1;
        }
        let run = &ops[start..i];
        let groupings = compositions(run);
        let mut next = Vec::with_capacity(variants.len() * groupings.len());
        for v in &variants {
            for g in &groupings {
                let mut w = v.clone();
                w.extend(g.iter().cloned());
                next.push(w);
            }
        }
        variants = next;
    }
    variants
}

/// All splits of a run into consecutive groups; groups of two or more ops
/// become one fused op.
fn compositions(run: &[PreprocOp]) -> Vec<Vec<PreprocOp>> {
    let n = run.len();
    let mut out = Vec::with_capacity(1 << (n - 1));
    for mask in 0u32..(1 << (n - 1)) {
        let mut groups = Vec::new();
        let mut current = vec![run[0].clone()];
        for (k, op) in run.iter().enumerate().skip(1) {
            if mask & (1 << (k - 1)) != 0 {
                groups.push(std::mem::take(&mut current));
            }
            current.push(op.clone());
        }
        groups.push(current);
        out.push(
            groups
                .into_iter()
                .map(|g| if g.len() == 1 { g.into_iter().next().unwrap() } else { PreprocOp::Fused { ops: g } })
                .collect(),
        );
    }
    out
}

/// Every plan reachable from `graph` through the reordering and fusion rules.
/// The input ordering (with its fusion undone) is always among the results.
pub fn enumerate_orderings(graph: &PreprocGraph) -> Vec<PreprocGraph> {
    let flat = flatten(graph.ops().cloned());
    if flat.len() == 1 {
        return vec![graph.clone()];
    }
    let convert = flat.iter().any(|o| matches!(o, PreprocOp::ConvertDtype));
    let norm = flat.iter().find_map(|o| match o {
        PreprocOp::Normalize(n) => Some(*n),
        _ => None,
    });
    let fixed: Vec<PreprocOp> = flat.iter().filter(|o| !o.is_movable()).cloned().collect();

    let mut skeletons = vec![fixed.clone()];
    for i in 1..fixed.len().saturating_sub(1) {
        if let Some((c, r)) = swap_resize_crop(shape_before(graph, &fixed, i), &fixed[i], &fixed[i + 1]) {
            let mut s = fixed.clone();
            s[i] = c;
            s[i + 1] = r;
            skeletons.push(s);
        }
    }

    let mut out = Vec::new();
    for skeleton in &skeletons {
        let gaps = skeleton.len();
        // (gap for convert, gap for normalize); ops go after skeleton[gap].
        let mut placements: Vec<(Option<usize>, Option<usize>)> = Vec::new();
        match (convert, norm.is_some()) {
            (true, true) => {
                for a in 0..gaps {
                    for b in a..gaps {
                        placements.push((Some(a), Some(b)));
                    }
                }
            }
            (true, false) => placements.extend((0..gaps).map(|a| (Some(a), None))),
            (false, true) => placements.extend((0..gaps).map(|b| (None, Some(b)))),
            (false, false) => placements.push((None, None)),
        }
        for (ca, nb) in placements {
            let mut ops = Vec::with_capacity(skeleton.len() + 2);
            for (g, op) in skeleton.iter().enumerate() {
                ops.push(op.clone());
                if ca == Some(g) {
                    ops.push(PreprocOp::ConvertDtype);
                }
                if nb == Some(g) {
                    ops.push(PreprocOp::Normalize(norm.expect("normalize present")));
                }
            }
            for variant in fusion_variants(&ops) {
                if let Ok(g) = graph.rebuild(variant) {
                    out.push(g);
                }
            }
        }
    }
    out
}

/// Input shape of `fixed[i]` when only the fixed ops run. Dtype is irrelevant
/// to the geometry computed from it.
fn shape_before(graph: &PreprocGraph, fixed: &[PreprocOp], i: usize) -> TensorShape {
    let mut shape = graph.source;
    for op in &fixed[..i] {
        shape = op.output_shape(shape).unwrap_or(shape);
    }
    shape
}

/// Candidate features the pruning rules compare on.
#[derive(Debug, Clone, Copy)]
struct RuleFeatures {
    resize_pixels: u64,
    resize_width: u64,
    unfused: usize,
    resize_cost: u64,
    other_cost: u64,
}

impl RuleFeatures {
    fn of(g: &PreprocGraph) -> Self {
        let resize = g.resize_input();
        let rc = resize_cost(g);
        Self {
            resize_pixels: resize.map_or(0, |s| s.pixels()),
            resize_width: resize.map_or(0, |s| s.dtype.width()),
            unfused: g.unfused_adjacencies(),
            resize_cost: rc,
            other_cost: plan_cost(g).arithmetic_ops - rc,
        }
    }

    /// `self` prunes `other`: better on at least one rule, no worse on any
    /// rule, and no more expensive in either cost component.
    fn prunes(&self, other: &Self) -> bool {
        let no_worse = self.resize_pixels <= other.resize_pixels
            && self.resize_width <= other.resize_width
            && self.unfused <= other.unfused
            && self.resize_cost <= other.resize_cost
            && self.other_cost <= other.other_cost;
        let better = self.resize_pixels < other.resize_pixels
            || self.resize_width < other.resize_width
            || self.unfused < other.unfused;
        no_worse && better
    }
}

/// Applies the rule-based pruning.
///
/// Resizing fewer pixels, resizing a narrower dtype and fusing are always
/// preferred. A plan is removed only when some other candidate is better on
/// one of those rules and not more expensive in any cost component, so the
/// cheapest plan always survives.
pub fn prune_plans(candidates: Vec<PreprocGraph>) -> Vec<PreprocGraph> {
    let features: Vec<RuleFeatures> = candidates.iter().map(RuleFeatures::of).collect();
    candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !features.iter().enumerate().any(|(j, f)| j != *i && f.prunes(&features[*i])))
        .map(|(_, g)| g)
        .collect()
}

fn cheaper(a: &PreprocGraph, b: &PreprocGraph) -> Ordering {
    plan_cost(a).cmp(&plan_cost(b)).then_with(|| a.sort_key().cmp(&b.sort_key()))
}

/// Cheapest plan after enumeration and pruning. Ties are broken by the
/// serialized op list so the result is deterministic.
pub fn optimize(graph: &PreprocGraph) -> PreprocGraph {
    prune_plans(enumerate_orderings(graph)).into_iter().min_by(cheaper).unwrap_or_else(|| graph.clone())
}

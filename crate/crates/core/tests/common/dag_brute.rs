//! Independent enumeration of every plan the reordering and fusion rules
//! allow for the canonical pipeline.

use std::collections::BTreeSet;

use visplan::dagopt::{Normalization, PreprocGraph, PreprocOp, ResampleMap};

fn elementwise(op: &PreprocOp) -> bool {
    matches!(op, PreprocOp::ConvertDtype | PreprocOp::Normalize(_) | PreprocOp::ChannelReorder)
}

/// Crop-first equivalent of `resize -> crop` on an `h x w` input.
fn crop_first(h: u32, w: u32, resize: (u32, u32), crop: (u32, u32, u32, u32)) -> [PreprocOp; 2] {
    let (rh, rw) = resize;
    let (top, left, ch, cw) = crop;
    let sy = h as f64 / rh as f64;
    let sx = w as f64 / rw as f64;
    let y0 = (top as f64 * sy).floor();
    let x0 = (left as f64 * sx).floor();
    let y1 = ((top + ch) as f64 * sy).ceil().min(h as f64);
    let x1 = ((left + cw) as f64 * sx).ceil().min(w as f64);
    [
        PreprocOp::Crop { top: y0 as u32, left: x0 as u32, height: (y1 - y0) as u32, width: (x1 - x0) as u32 },
        PreprocOp::Resize {
            height: ch,
            width: cw,
            map: Some(ResampleMap {
                scale_y: sy,
                scale_x: sx,
                offset_y: top as f64 * sy - y0,
                offset_x: left as f64 * sx - x0,
            }),
        },
    ]
}

/// Interleavings of the fixed ops with Convert and Normalize inserted
/// anywhere after Decode.
fn interleave(
    prefix: &mut Vec<PreprocOp>,
    rest: &[PreprocOp],
    movable: &mut Vec<PreprocOp>,
    out: &mut Vec<Vec<PreprocOp>>,
) {
    if rest.is_empty() && movable.is_empty() {
        out.push(prefix.clone());
        return;
    }
    if let Some((first, tail)) = rest.split_first() {
        prefix.push(first.clone());
        interleave(prefix, tail, movable, out);
        prefix.pop();
    }
    if prefix.is_empty() {
        return;
    }
    for i in 0..movable.len() {
        let op = movable.remove(i);
        prefix.push(op.clone());
        interleave(prefix, rest, movable, out);
        prefix.pop();
        movable.insert(i, op);
    }
}

/// Every grouping of contiguous elementwise ops into fused ops.
fn fusions(ops: &[PreprocOp]) -> Vec<Vec<PreprocOp>> {
    let Some(first) = ops.first() else {
        return vec![Vec::new()];
    };
    let mut out = Vec::new();
    if !elementwise(first) {
        for mut tail in fusions(&ops[1..]) {
            tail.insert(0, first.clone());
            out.push(tail);
        }
        return out;
    }
    let run = ops.iter().take_while(|o| elementwise(o)).count();
    for k in 1..=run {
        let head = if k == 1 { ops[0].clone() } else { PreprocOp::Fused { ops: ops[..k].to_vec() } };
        for mut tail in fusions(&ops[k..]) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

pub fn key(g: &PreprocGraph) -> String {
    serde_json::to_string(g).unwrap()
}

/// All valid plans for the canonical pipeline on an `h x w` source.
pub fn brute_force(h: u32, w: u32, short: u32, crop: u32) -> Vec<PreprocGraph> {
    let canonical = PreprocGraph::canonical(h, w, short, crop, Normalization::imagenet()).unwrap();
    let steps = canonical.steps();
    let PreprocOp::Resize { height: rh, width: rw, .. } = steps[1].op else { panic!("resize second") };
    let PreprocOp::Crop { top, left, height: ch, width: cw } = steps[2].op else { panic!("crop third") };
    let resize_first = vec![steps[1].op.clone(), steps[2].op.clone(), PreprocOp::ChannelReorder];
    let [c, r] = crop_first(h, w, (rh, rw), (top, left, ch, cw));
    let skeletons = [resize_first, vec![c, r, PreprocOp::ChannelReorder]];

    let target = canonical.output();
    let mut seen = BTreeSet::new();
    let mut plans = Vec::new();
    for skeleton in &skeletons {
        let mut orders = Vec::new();
        let mut movable = vec![PreprocOp::ConvertDtype, PreprocOp::Normalize(Normalization::imagenet())];
        interleave(&mut vec![PreprocOp::Decode], skeleton, &mut movable, &mut orders);
        for order in orders {
            for ops in fusions(&order) {
                let Ok(g) = PreprocGraph::new(h, w, 3, ops) else { continue };
                if g.output() != target || seen.contains(&key(&g)) {
                    continue;
                }
                seen.insert(key(&g));
                plans.push(g);
            }
        }
    }
    plans
}

//! Executes preprocessing plans on decoded images.

use std::time::{Duration, Instant};

use crate::dagopt::{Dtype, Layout, PreprocGraph, PreprocOp, TensorShape};
use crate::jpegdec::Image;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_image(img: &Image) -> Self {
        Self {
            shape: TensorShape::image(img.height, img.width, img.channels),
            data: TensorData::U8(img.pixels.clone()),
        }
    }

    pub fn into_image(self) -> Option<Image> {
        match (self.shape.layout, self.data) {
            (Layout::Hwc, TensorData::U8(pixels)) => Some(Image {
                width: self.shape.width,
                height: self.shape.height,
                channels: self.shape.channels,
                pixels,
            }),
            _ => None,
        }
    }

    /// Element at `(y, x, c)` regardless of layout, widened to f32.
    pub fn get(&self, y: u32, x: u32, c: u32) -> f32 {
        let i = index(self.shape, y, x, c);
        match &self.data {
            TensorData::U8(v) => v[i] as f32,
            TensorData::F32(v) => v[i],
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }
}

#[inline]
fn index(shape: TensorShape, y: u32, x: u32, c: u32) -> usize {
    let (h, w, ch) = (shape.height as usize, shape.width as usize, shape.channels as usize);
    let (y, x, c) = (y as usize, x as usize, c as usize);
    match shape.layout {
        Layout::Hwc => (y * w + x) * ch + c,
        Layout::Chw => (c * h + y) * w + x,
    }
}

/// Per-op-category busy time, for throughput breakdowns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub decode: Duration,
    pub resize: Duration,
    pub crop: Duration,
    pub normalize: Duration,
}

impl StageTimes {
    pub fn add(&mut self, other: &StageTimes) {
        self.decode += other.decode;
        self.resize += other.resize;
        self.crop += other.crop;
        self.normalize += other.normalize;
    }
}

/// Runs every op after the decode. `input` must match the graph's source.
pub fn execute(graph: &PreprocGraph, input: Tensor) -> Tensor {
    execute_from(graph, 1, input, &mut StageTimes::default())
}

/// Runs ops `first..` of `graph` on `input`, charging wall time to `times`.
/// The engine uses a later start when the decoder already applied a crop.
pub fn execute_from(graph: &PreprocGraph, first: usize, mut input: Tensor, times: &mut StageTimes) -> Tensor {
    for step in &graph.steps()[first..] {
        assert_eq!(input.shape, step.input, "tensor does not match plan at {}", step.op.name());
        let start = Instant::now();
        input = apply(&step.op, input, step.output);
        let spent = start.elapsed();
        match step.op {
            PreprocOp::Decode => times.decode += spent,
            PreprocOp::Resize { .. } => times.resize += spent,
            PreprocOp::Crop { .. } => times.crop += spent,
            _ => times.normalize += spent,
        }
    }
    input
}

fn apply(op: &PreprocOp, input: Tensor, out: TensorShape) -> Tensor {
    match op {
        PreprocOp::Decode => input,
        PreprocOp::Resize { map, .. } => {
            let (sy, sx, oy, ox) = match map {
                Some(m) => (m.scale_y, m.scale_x, m.offset_y, m.offset_x),
                None => (
                    input.shape.height as f64 / out.height as f64,
                    input.shape.width as f64 / out.width as f64,
                    0.0,
                    0.0,
                ),
            };
            resize_bilinear(&input, out, (sy, sx), (oy, ox))
        }
        PreprocOp::Crop { top, left, .. } => crop(&input, out, *top, *left),
        PreprocOp::ConvertDtype | PreprocOp::Normalize(_) | PreprocOp::ChannelReorder | PreprocOp::Fused { .. } => {
            elementwise(op, &input, out)
        }
    }
}

struct Taps {
    lo: Vec<u32>,
    hi: Vec<u32>,
    frac: Vec<f32>,
}

fn taps(out_len: u32, in_len: u32, scale: f64, offset: f64) -> Taps {
    let mut t = Taps { lo: Vec::new(), hi: Vec::new(), frac: Vec::new() };
    let last = in_len - 1;
    for i in 0..out_len {
        let s = ((i as f64 + 0.5) * scale - 0.5 + offset).clamp(0.0, last as f64);
        let lo = s.floor() as u32;
        t.lo.push(lo);
        t.hi.push((lo + 1).min(last));
        t.frac.push((s - lo as f64) as f32);
    }
    t
}

fn resize_bilinear(input: &Tensor, out: TensorShape, scale: (f64, f64), offset: (f64, f64)) -> Tensor {
    let ty = taps(out.height, input.shape.height, scale.0, offset.0);
    let tx = taps(out.width, input.shape.width, scale.1, offset.1);
    let c = out.channels;
    let n = out.elements() as usize;
    if let (TensorData::U8(src), Layout::Hwc) = (&input.data, input.shape.layout) {
        // Same arithmetic as `sample` below with the indexing hoisted.
        let (stride, c) = ((input.shape.width * c) as usize, c as usize);
        let mut v = Vec::with_capacity(n);
        for y in 0..out.height as usize {
            let (r0, r1, fy) = (ty.lo[y] as usize * stride, ty.hi[y] as usize * stride, ty.frac[y]);
            for x in 0..out.width as usize {
                let (x0, x1, fx) = (tx.lo[x] as usize * c, tx.hi[x] as usize * c, tx.frac[x]);
                for ch in 0..c {
                    let px = |i: usize| src[i + ch] as f32;
                    let top = px(r0 + x0) * (1.0 - fx) + px(r0 + x1) * fx;
                    let bottom = px(r1 + x0) * (1.0 - fx) + px(r1 + x1) * fx;
                    v.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        return Tensor { shape: out, data: TensorData::U8(v) };
    }
    let sample = |y: usize, x: usize, ch: u32| -> f32 {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
        let top = input.get(y0, x0, ch) * (1.0 - fx) + input.get(y0, x1, ch) * fx;
        let bottom = input.get(y1, x0, ch) * (1.0 - fx) + input.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let data = match input.data {
        TensorData::U8(_) => {
            let mut v = Vec::with_capacity(n);
            for y in 0..out.height as usize {
                for x in 0..out.width as usize {
                    for ch in 0..c {
                        v.push(sample(y, x, ch).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            TensorData::U8(v)
        }
        TensorData::F32(_) => {
            let mut v = Vec::with_capacity(n);
            for y in 0..out.height as usize {
                for x in 0..out.width as usize {
                    for ch in 0..c {
                        v.push(sample(y, x, ch));
                    }
                }
            }
            TensorData::F32(v)
        }
    };
    Tensor { shape: out, data }
}

fn crop(input: &Tensor, out: TensorShape, top: u32, left: u32) -> Tensor {
    let row = (out.width * out.channels) as usize;
    let in_row = (input.shape.width * input.shape.channels) as usize;
    let start = (left * input.shape.channels) as usize;
    fn rows<T: Copy>(src: &[T], top: u32, h: u32, in_row: usize, start: usize, row: usize) -> Vec<T> {
        let mut v = Vec::with_capacity(h as usize * row);
        for y in top..top + h {
            let base = y as usize * in_row + start;
            v.extend_from_slice(&src[base..base + row]);
        }
        v
    }
    let data = match &input.data {
        TensorData::U8(src) => TensorData::U8(rows(src, top, out.height, in_row, start, row)),
        TensorData::F32(src) => TensorData::F32(rows(src, top, out.height, in_row, start, row)),
    };
    Tensor { shape: out, data }
}

/// Single pass over the input applying the op (or each member of a fused
/// op) to every element.
fn elementwise(op: &PreprocOp, input: &Tensor, out: TensorShape) -> Tensor {
    let members: &[PreprocOp] = match op {
        PreprocOp::Fused { ops } => ops,
        single => std::slice::from_ref(single),
    };
    let n = out.elements() as usize;
    let mut f32_out = if out.dtype == Dtype::F32 { vec![0f32; n] } else { Vec::new() };
    let mut u8_out = if out.dtype == Dtype::U8 { vec![0u8; n] } else { Vec::new() };
    let s = input.shape;
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                let mut v = input.get(y, x, c);
                for m in members {
                    if let PreprocOp::Normalize(norm) = m {
                        v = norm.apply(v, c as usize);
                    }
                }
                let i = index(out, y, x, c);
                match out.dtype {
                    Dtype::F32 => f32_out[i] = v,
                    Dtype::U8 => u8_out[i] = v as u8,
                }
            }
        }
    }
    let data = match out.dtype {
        Dtype::F32 => TensorData::F32(f32_out),
        Dtype::U8 => TensorData::U8(u8_out),
    };
    Tensor { shape: out, data }
}

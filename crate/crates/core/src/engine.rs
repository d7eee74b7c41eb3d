//! Pipelined execution: producers decode and preprocess into pooled batch
//! buffers, a bounded queue hands full batches to consumers, and consumers
//! run an [`Executor`] and recycle the buffers.
//!
//! Producers claim contiguous ranges of item indices from a shared counter,
//! one batch at a time, so every item is handled by exactly one producer.
//! Items that fail to decode are counted and skipped. Shutdown sends one stop
//! message per consumer after every producer has finished.
//!
//! The pool allocates at most `buffer_pool_size` buffers, lazily, and never
//! grows them afterwards. [`PoolStats`] reports how many were allocated and
//! whether any buffer had to reallocate its storage during the run.
//!
//! Synthetic throughput profiles are emulated with a [`Pacer`]: each worker
//! reserves time on a lane and sleeps until its absolute deadline, so the
//! aggregate rate never exceeds the profile even with many threads.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::preprocessing_plan_for;
use crate::dagopt::{PreprocGraph, PreprocOp, TensorShape};
use crate::jpegdec::{self, Image, RoiSpec};
use crate::planner::PlanConfig;
use crate::preproc::{execute_from, StageTimes, Tensor, TensorData};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("data source is empty")]
    EmptySource,
    #[error("data source: {0}")]
    Source(String),
    #[error("executor failed: {0}")]
    Executor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub producer_count: usize,
    pub consumer_count: usize,
    /// Queue capacity in batches.
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub buffer_pool_size: usize,
    /// Caps aggregate preprocessing at this many images per second, to
    /// emulate a slower preprocessing stage.
    #[serde(default)]
    pub preproc_rate_limit: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::new(std::thread::available_parallelism().map_or(1, |n| n.get()), 2)
    }
}

impl EngineConfig {
    /// Queue of 8 batches of 64 and the smallest pool that never starves a
    /// worker.
    pub fn new(producers: usize, consumers: usize) -> Self {
        let queue = 8;
        Self {
            producer_count: producers,
            consumer_count: consumers,
            queue_capacity: queue,
            batch_size: 64,
            buffer_pool_size: queue + producers + consumers,
            preproc_rate_limit: None,
        }
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        self.batch_size = batch;
        self
    }

    pub fn with_queue_capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self.buffer_pool_size = capacity + self.producer_count + self.consumer_count;
        self
    }

    pub fn with_preproc_rate_limit(mut self, rate: f64) -> Self {
        self.preproc_rate_limit = Some(rate);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let fields = [
            ("producer_count", self.producer_count),
            ("consumer_count", self.consumer_count),
            ("queue_capacity", self.queue_capacity),
            ("batch_size", self.batch_size),
            ("buffer_pool_size", self.buffer_pool_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(EngineError::Config(format!("{name} must be positive")));
            }
        }
        if self.buffer_pool_size < self.queue_capacity + self.consumer_count {
            return Err(EngineError::Config(format!(
                "buffer_pool_size {} is below queue_capacity + consumer_count = {}",
                self.buffer_pool_size,
                self.queue_capacity + self.consumer_count
            )));
        }
        if let Some(r) = self.preproc_rate_limit {
            if !(r.is_finite() && r > 0.0) {
                return Err(EngineError::Config(format!("preproc_rate_limit {r} must be positive")));
            }
        }
        Ok(())
    }
}

/// Reusable storage for one batch of preprocessed items.
#[derive(Debug)]
pub struct BatchBuffer {
    capacity: usize,
    item_len: usize,
    filled: usize,
    data: Vec<f32>,
    item_ids: Vec<u64>,
}

impl BatchBuffer {
    /// Zeroed storage for `capacity` items of `item_len` elements each.
    pub fn new(capacity: usize, item_len: usize) -> Self {
        Self {
            capacity,
            item_len,
            filled: 0,
            data: vec![0.0; capacity * item_len],
            item_ids: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    /// Elements per item.
    pub fn item_len(&self) -> usize {
        self.item_len
    }

    /// Preprocessed tensor of the `i`-th item in the batch.
    pub fn item(&self, i: usize) -> &[f32] {
        assert!(i < self.filled, "item {i} of {} filled", self.filled);
        &self.data[i * self.item_len..(i + 1) * self.item_len]
    }

    /// Appends one item. Returns false when the batch is already full.
    pub fn push(&mut self, id: u64, values: &[f32]) -> bool {
        if self.is_full() {
            return false;
        }
        assert_eq!(values.len(), self.item_len, "item tensor size");
        let start = self.filled * self.item_len;
        self.data[start..start + self.item_len].copy_from_slice(values);
        self.item_ids.push(id);
        self.filled += 1;
        true
    }

    fn clear(&mut self) {
        self.filled = 0;
        self.item_ids.clear();
    }

    fn storage(&self) -> (usize, usize) {
        (self.data.capacity(), self.item_ids.capacity())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    /// Buffers created over the run; never more than the pool size.
    pub allocations: usize,
    /// Most buffers checked out at once.
    pub high_water: usize,
    /// Times a recycled buffer came back with different storage, i.e. a
    /// batch allocation after warm-up.
    pub reallocations: usize,
}

/// Fixed-size free list of batch buffers.
struct BufferPool {
    free_tx: Sender<Box<BatchBuffer>>,
    free_rx: Receiver<Box<BatchBuffer>>,
    size: usize,
    batch: usize,
    item_len: usize,
    allocated: AtomicUsize,
    in_use: AtomicUsize,
    high_water: AtomicUsize,
    reallocations: AtomicUsize,
}

impl BufferPool {
    fn new(size: usize, batch: usize, item_len: usize) -> Self {
        let (free_tx, free_rx) = bounded(size);
        Self {
            free_tx,
            free_rx,
            size,
            batch,
            item_len,
            allocated: AtomicUsize::new(0),
            in_use: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            reallocations: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Box<BatchBuffer> {
        let buf = match self.free_rx.try_recv() {
            Ok(b) => b,
            Err(_) => {
                let claimed = self
                    .allocated
                    .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < self.size).then_some(n + 1));
                match claimed {
                    Ok(_) => Box::new(BatchBuffer::new(self.batch, self.item_len)),
                    Err(_) => self.free_rx.recv().expect("pool owns a sender"),
                }
            }
        };
        let now = self.in_use.fetch_add(1, Ordering::AcqRel) + 1;
        self.high_water.fetch_max(now, Ordering::AcqRel);
        buf
    }

    fn release(&self, mut buf: Box<BatchBuffer>) {
        let expected = (self.batch * self.item_len, self.batch);
        let (data, ids) = buf.storage();
        if data != expected.0 || ids < expected.1 {
            self.reallocations.fetch_add(1, Ordering::Relaxed);
        }
        buf.clear();
        self.in_use.fetch_sub(1, Ordering::AcqRel);
        self.free_tx.send(buf).expect("pool owns a receiver");
    }

    fn stats(&self) -> PoolStats {
        PoolStats {
            allocations: self.allocated.load(Ordering::Acquire),
            high_water: self.high_water.load(Ordering::Acquire),
            reallocations: self.reallocations.load(Ordering::Acquire),
        }
    }
}

enum Message {
    Batch(Box<BatchBuffer>),
    Stop,
}

/// Rate limiter with independent lanes and absolute deadlines.
///
/// Each reservation books `items / rate` seconds on the lane that frees up
/// first and sleeps until the booking ends. Deadlines chain from the previous
/// booking, so sleep overshoot is recovered, while idle time beyond a small
/// slack is forfeited rather than banked.
#[derive(Debug)]
pub struct Pacer {
    per_item: Duration,
    lanes: Mutex<Vec<Instant>>,
}

const PACER_SLACK: Duration = Duration::from_millis(2);

impl Pacer {
    /// `rate` items per second on each of `lanes` lanes.
    pub fn new(rate: f64, lanes: usize) -> Self {
        assert!(rate.is_finite() && rate > 0.0, "pacer rate must be positive");
        let now = Instant::now();
        Self { per_item: Duration::from_secs_f64(1.0 / rate), lanes: Mutex::new(vec![now; lanes.max(1)]) }
    }

    /// Books time for `items` plus `extra`, then sleeps until the booking
    /// ends.
    pub fn pace(&self, items: usize, extra: Duration) {
        self.pace_from(Instant::now(), items, extra)
    }

    /// [`Pacer::pace`] for work that arrived at `now`, so that real work done
    /// since then counts against the booking.
    pub fn pace_from(&self, now: Instant, items: usize, extra: Duration) {
        let deadline = {
            let mut lanes = self.lanes.lock().expect("pacer lock");
            let (i, _) = lanes.iter().enumerate().min_by_key(|(_, t)| **t).expect("at least one lane");
            let start = lanes[i].max(now.checked_sub(PACER_SLACK).unwrap_or(now));
            let end = start + self.per_item * items as u32 + extra;
            lanes[i] = end;
            end
        };
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Result of running one item through a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemOutput {
    pub id: u64,
    /// Confidence in `[0, 1)`.
    pub score: f32,
    pub label: u32,
}

impl ItemOutput {
    /// Deterministic stand-in for a model: hashes the item tensor.
    pub fn from_tensor(id: u64, values: &[f32]) -> Self {
        const PRIME: u64 = 0x0100_0000_01b3;
        // Four interleaved FNV-1a lanes keep the multiply chain off the
        // critical path for model-sized tensors.
        let mut lanes = [0xcbf2_9ce4_8422_2325u64; 4];
        let chunks = values.chunks_exact(4);
        let tail = chunks.remainder();
        for chunk in chunks {
            for (h, v) in lanes.iter_mut().zip(chunk) {
                *h = (*h ^ v.to_bits() as u64).wrapping_mul(PRIME);
            }
        }
        for (h, v) in lanes.iter_mut().zip(tail) {
            *h = (*h ^ v.to_bits() as u64).wrapping_mul(PRIME);
        }
        let mut h = lanes.iter().fold(values.len() as u64, |acc, &l| (acc ^ l).wrapping_mul(PRIME));
        h ^= h >> 29;
        Self { id, score: (h >> 40) as f32 / (1u64 << 24) as f32, label: (h % 1000) as u32 }
    }
}

/// Runs batches of preprocessed items. Consumers call it concurrently.
pub trait Executor: Sync {
    fn run(&self, batch: &BatchBuffer) -> Result<Vec<ItemOutput>, String>;

    /// Declared throughput in images per second, if known.
    fn profile_throughput(&self) -> Option<f64> {
        None
    }
}

/// An executor that takes `filled / throughput` seconds per batch on a
/// device with `streams` parallel execution streams, plus an optional
/// host-to-device transfer cost.
#[derive(Debug)]
pub struct SyntheticExecutor {
    throughput: f64,
    transfer_bytes_per_sec: Option<f64>,
    pacer: Pacer,
}

impl SyntheticExecutor {
    pub fn new(throughput: f64) -> Self {
        Self::with_streams(throughput, 1)
    }

    /// `throughput` per stream; the device sustains `streams * throughput`
    /// when enough consumers keep it busy.
    pub fn with_streams(throughput: f64, streams: usize) -> Self {
        Self { throughput, transfer_bytes_per_sec: None, pacer: Pacer::new(throughput, streams) }
    }

    /// Charges the batch's tensor bytes at `bytes_per_sec` before execution.
    pub fn with_transfer(mut self, bytes_per_sec: f64) -> Self {
        assert!(bytes_per_sec > 0.0, "transfer rate must be positive");
        self.transfer_bytes_per_sec = Some(bytes_per_sec);
        self
    }

    /// Time one batch of `items` occupies a stream.
    pub fn batch_latency(&self, items: usize, item_len: usize) -> Duration {
        let exec = items as f64 / self.throughput;
        let transfer = self.transfer_bytes_per_sec.map_or(0.0, |bw| (items * item_len * 4) as f64 / bw);
        Duration::from_secs_f64(exec + transfer)
    }
}

/// Builds a [`SyntheticExecutor`] with one stream.
pub fn synthetic_executor(profile_throughput: f64) -> SyntheticExecutor {
    SyntheticExecutor::new(profile_throughput)
}

impl Executor for SyntheticExecutor {
    fn run(&self, batch: &BatchBuffer) -> Result<Vec<ItemOutput>, String> {
        let arrived = Instant::now();
        let outputs =
            (0..batch.filled()).map(|i| ItemOutput::from_tensor(batch.item_ids()[i], batch.item(i))).collect();
        let transfer = self
            .transfer_bytes_per_sec
            .map_or(Duration::ZERO, |bw| Duration::from_secs_f64((batch.filled() * batch.item_len() * 4) as f64 / bw));
        self.pacer.pace_from(arrived, batch.filled(), transfer);
        Ok(outputs)
    }

    fn profile_throughput(&self) -> Option<f64> {
        Some(self.throughput)
    }
}

/// Where items come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// JPEG files, decoded per item.
    Files(Vec<PathBuf>),
    /// JPEG streams already in memory.
    Encoded(Vec<Arc<Vec<u8>>>),
    /// `count` pseudo-random RGB images, reproducible from `seed`.
    Synthetic { count: usize, height: u32, width: u32, seed: u64 },
}

impl DataSource {
    /// Every `.jpg`/`.jpeg` file in `dir`, sorted by name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, EngineError> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| EngineError::Source(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("jpg") || x.eq_ignore_ascii_case("jpeg"))
            })
            .collect();
        paths.sort();
        Ok(DataSource::Files(paths))
    }

    /// Newline-delimited paths; relative paths resolve against the
    /// manifest's directory. Blank lines and `#` comments are ignored.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| EngineError::Source(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let paths = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        Ok(DataSource::Files(paths))
    }

    pub fn len(&self) -> usize {
        match self {
            DataSource::Files(p) => p.len(),
            DataSource::Encoded(b) => b.len(),
            DataSource::Synthetic { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The synthetic image for item `index`.
    pub fn synthetic_image(height: u32, width: u32, seed: u64, index: u64) -> Image {
        let mut img = Image::new(width, height, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.fill_bytes(&mut img.pixels);
        img
    }
}

/// Preprocessing for one producer: caches a plan per source size.
struct Preprocessor<'a> {
    plan: &'a PreprocGraph,
    resolution: [u32; 2],
    cache: HashMap<(u32, u32), PreprocGraph>,
    times: StageTimes,
}

impl<'a> Preprocessor<'a> {
    fn new(plan: &'a PlanConfig) -> Self {
        let resolution = plan.dnns.last().map_or([224, 224], |d| d.input_resolution);
        Self { plan: &plan.preproc_plan, resolution, cache: HashMap::new(), times: StageTimes::default() }
    }

    fn graph_for(&mut self, height: u32, width: u32) -> &PreprocGraph {
        let src = self.plan.source();
        if (src.height, src.width) == (height, width) {
            return self.plan;
        }
        let [rh, rw] = self.resolution;
        self.cache.entry((height, width)).or_insert_with(|| preprocessing_plan_for(height, width, [rh, rw]))
    }

    /// Decodes (restricted to the plan's leading crop when there is one) and
    /// preprocesses one item.
    fn process(&mut self, source: &DataSource, index: usize) -> Result<Tensor, String> {
        let start = Instant::now();
        let bytes: Arc<Vec<u8>> = match source {
            DataSource::Files(paths) => {
                Arc::new(std::fs::read(&paths[index]).map_err(|e| format!("{}: {e}", paths[index].display()))?)
            }
            DataSource::Encoded(items) => items[index].clone(),
            DataSource::Synthetic { height, width, seed, .. } => {
                let img = DataSource::synthetic_image(*height, *width, *seed, index as u64);
                self.times.decode += start.elapsed();
                let g = self.graph_for(*height, *width).clone();
                let mut times = StageTimes::default();
                let out = execute_from(&g, 1, Tensor::from_image(&img), &mut times);
                self.times.add(&times);
                return Ok(out);
            }
        };
        let header = jpegdec::parse_headers(&bytes).map_err(|e| e.to_string())?;
        let graph = self.graph_for(header.height, header.width).clone();
        let (img, first) = match graph.steps().get(1).map(|s| &s.op) {
            Some(PreprocOp::Crop { top, left, height, width }) => {
                let roi = RoiSpec { left: *left, top: *top, right: left + width, bottom: top + height };
                (jpegdec::decode_roi(&bytes, roi).map_err(|e| e.to_string())?, 2)
            }
            _ => (jpegdec::decode_full(&bytes).map_err(|e| e.to_string())?, 1),
        };
        self.times.decode += start.elapsed();
        let mut times = StageTimes::default();
        let out = execute_from(&graph, first, Tensor::from_image(&img), &mut times);
        self.times.add(&times);
        Ok(out)
    }
}

fn tensor_values(t: &Tensor) -> std::borrow::Cow<'_, [f32]> {
    match &t.data {
        TensorData::F32(v) => std::borrow::Cow::Borrowed(v),
        TensorData::U8(v) => std::borrow::Cow::Owned(v.iter().map(|&x| x as f32).collect()),
    }
}

/// Seconds spent per stage, summed over workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSeconds {
    pub decode: f64,
    pub resize: f64,
    pub crop: f64,
    pub normalize: f64,
    pub execute: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub images_processed: u64,
    pub decode_failures: u64,
    pub batches: u64,
    pub wall_seconds: f64,
    /// Producer throughput while busy (blocking on the queue excluded).
    pub preproc_throughput: f64,
    /// Executor throughput while busy.
    pub exec_throughput: f64,
    pub e2e_throughput: f64,
    /// `queue_occupancy_histogram[k]` counts enqueues that left `k` batches
    /// waiting.
    pub queue_occupancy_histogram: Vec<u64>,
    pub stage_seconds: StageSeconds,
    pub pool: PoolStats,
}

impl RunStats {
    /// `stage,throughput_im_s` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "throughput_im_s"]).expect("in-memory write");
        for (stage, t) in
            [("preproc", self.preproc_throughput), ("exec", self.exec_throughput), ("e2e", self.e2e_throughput)]
        {
            w.write_record([stage, &format!("{t:.3}")]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub stats: RunStats,
    /// One output per successfully processed item, in completion order.
    pub outputs: Vec<ItemOutput>,
    pub failed_items: Vec<u64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Full,
    PreprocOnly,
}

/// Decodes, preprocesses, batches and executes every item of `source`.
pub fn run_pipeline(
    plan: &PlanConfig,
    source: &DataSource,
    executor: &dyn Executor,
    config: &EngineConfig,
) -> Result<RunOutput, EngineError> {
    run(plan, source, Some(executor), config, Mode::Full)
}

fn run(
    plan: &PlanConfig,
    source: &DataSource,
    executor: Option<&dyn Executor>,
    config: &EngineConfig,
    mode: Mode,
) -> Result<RunOutput, EngineError> {
    config.validate()?;
    if source.is_empty() {
        return Err(EngineError::EmptySource);
    }
    let item_len = plan.preproc_plan.output().elements() as usize;
    let n = source.len();
    let pool = BufferPool::new(config.buffer_pool_size, config.batch_size, item_len);
    let (tx, rx) = bounded::<Message>(config.queue_capacity);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let producer_busy = AtomicU64::new(0);
    let consumer_busy = AtomicU64::new(0);
    let histogram: Vec<AtomicU64> = (0..=config.queue_capacity).map(|_| AtomicU64::new(0)).collect();
    let pacer = config.preproc_rate_limit.map(|r| Pacer::new(r / config.producer_count as f64, config.producer_count));
    let failed = Mutex::new(Vec::new());
    let outputs = Mutex::new(Vec::with_capacity(n));
    let times = Mutex::new(StageTimes::default());
    let exec_error: Mutex<Option<String>> = Mutex::new(None);
    let batches = AtomicU64::new(0);
    let started = Instant::now();

    std::thread::scope(|s| {
        let producers: Vec<_> = (0..config.producer_count)
            .map(|_| {
                s.spawn(|| {
                    let mut pre = Preprocessor::new(plan);
                    let mut busy = Duration::ZERO;
                    while !abort.load(Ordering::Acquire) {
                        let first = next.fetch_add(config.batch_size, Ordering::AcqRel);
                        if first >= n {
                            break;
                        }
                        let mut buf = pool.acquire();
                        let t1 = Instant::now();
                        for i in first..(first + config.batch_size).min(n) {
                            match pre.process(source, i) {
                                Ok(t) => {
                                    buf.push(i as u64, &tensor_values(&t));
                                }
                                Err(_) => failed.lock().expect("lock").push(i as u64),
                            }
                        }
                        if let Some(p) = &pacer {
                            p.pace(buf.filled(), Duration::ZERO);
                        }
                        busy += t1.elapsed();
                        if buf.filled() == 0 {
                            pool.release(buf);
                            continue;
                        }
                        tx.send(Message::Batch(buf)).expect("consumers outlive producers");
                        histogram[tx.len().min(config.queue_capacity)].fetch_add(1, Ordering::Relaxed);
                    }
                    producer_busy.fetch_add(busy.as_nanos() as u64, Ordering::Relaxed);
                    times.lock().expect("lock").add(&pre.times);
                })
            })
            .collect();
        let consumers: Vec<_> = (0..config.consumer_count)
            .map(|_| {
                s.spawn(|| {
                    let mut busy = Duration::ZERO;
                    let mut local = Vec::new();
                    while let Ok(Message::Batch(buf)) = rx.recv() {
                        batches.fetch_add(1, Ordering::Relaxed);
                        if mode == Mode::Full && !abort.load(Ordering::Acquire) {
                            let t0 = Instant::now();
                            match executor.expect("full mode has an executor").run(&buf) {
                                Ok(out) => local.extend(out),
                                Err(e) => {
                                    exec_error.lock().expect("lock").get_or_insert(e);
                                    abort.store(true, Ordering::Release);
                                }
                            }
                            busy += t0.elapsed();
                        } else if mode == Mode::PreprocOnly {
                            local.extend(buf.item_ids().iter().map(|&id| ItemOutput { id, score: 0.0, label: 0 }));
                        }
                        pool.release(buf);
                    }
                    consumer_busy.fetch_add(busy.as_nanos() as u64, Ordering::Relaxed);
                    outputs.lock().expect("lock").extend(local);
                })
            })
            .collect();
        for p in producers {
            p.join().expect("producer panicked");
        }
        for _ in 0..config.consumer_count {
            tx.send(Message::Stop).expect("consumers running");
        }
        for c in consumers {
            c.join().expect("consumer panicked");
        }
    });

    let wall = started.elapsed().as_secs_f64();
    if let Some(e) = exec_error.into_inner().expect("lock") {
        return Err(EngineError::Executor(e));
    }
    let outputs = outputs.into_inner().expect("lock");
    let mut failed_items = failed.into_inner().expect("lock");
    failed_items.sort_unstable();
    let processed = outputs.len() as u64;
    let rate = |busy_ns: u64, workers: usize| {
        let secs = busy_ns as f64 / 1e9 / workers as f64;
        if secs > 0.0 {
            processed as f64 / secs
        } else {
            0.0
        }
    };
    let t = times.into_inner().expect("lock");
    let exec_busy = consumer_busy.load(Ordering::Relaxed);
    let stats = RunStats {
        images_processed: processed,
        decode_failures: failed_items.len() as u64,
        batches: batches.load(Ordering::Relaxed),
        wall_seconds: wall,
        preproc_throughput: rate(producer_busy.load(Ordering::Relaxed), config.producer_count),
        exec_throughput: rate(exec_busy, config.consumer_count),
        e2e_throughput: processed as f64 / wall,
        queue_occupancy_histogram: histogram.iter().map(|h| h.load(Ordering::Relaxed)).collect(),
        stage_seconds: StageSeconds {
            decode: t.decode.as_secs_f64(),
            resize: t.resize.as_secs_f64(),
            crop: t.crop.as_secs_f64(),
            normalize: t.normalize.as_secs_f64(),
            execute: exec_busy as f64 / 1e9,
        },
        pool: pool.stats(),
    };
    Ok(RunOutput { stats, outputs, failed_items })
}

/// Throughput of each stage alone and of the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageThroughputs {
    pub preproc: f64,
    pub exec: f64,
    pub e2e: f64,
    /// Statistics of the full pipelined run.
    pub pipeline: RunStats,
}

/// Runs the producers alone (results discarded), the executor alone on
/// replayed buffers, and the full pipeline, timing each.
pub fn measure_stage_throughputs(
    plan: &PlanConfig,
    source: &DataSource,
    executor: &dyn Executor,
    config: &EngineConfig,
) -> Result<StageThroughputs, EngineError> {
    let pre = run(plan, source, None, config, Mode::PreprocOnly)?;
    let preproc = pre.stats.images_processed as f64 / pre.stats.wall_seconds;
    let exec = measure_exec_only(plan.preproc_plan.output(), source.len(), executor, config)?;
    let full = run_pipeline(plan, source, executor, config)?;
    Ok(StageThroughputs { preproc, exec, e2e: full.stats.e2e_throughput, pipeline: full.stats })
}

/// Executor throughput over `items` items of `shape`, with each consumer
/// replaying one pre-filled buffer.
pub fn measure_exec_only(
    shape: TensorShape,
    items: usize,
    executor: &dyn Executor,
    config: &EngineConfig,
) -> Result<f64, EngineError> {
    config.validate()?;
    if items == 0 {
        return Err(EngineError::EmptySource);
    }
    let item_len = shape.elements() as usize;
    let next = AtomicUsize::new(0);
    let error: Mutex<Option<String>> = Mutex::new(None);
    // The clock starts once every consumer has filled its buffer.
    let ready = Barrier::new(config.consumer_count);
    let started = OnceLock::new();
    std::thread::scope(|s| {
        for c in 0..config.consumer_count {
            let (next, error, ready, started) = (&next, &error, &ready, &started);
            s.spawn(move || {
                let mut full = BatchBuffer::new(config.batch_size, item_len);
                let values: Vec<f32> = (0..item_len).map(|i| ((i + c) % 251) as f32 / 251.0).collect();
                for i in 0..config.batch_size {
                    full.push(i as u64, &values);
                }
                ready.wait();
                started.get_or_init(Instant::now);
                loop {
                    let first = next.fetch_add(config.batch_size, Ordering::AcqRel);
                    if first >= items || error.lock().expect("lock").is_some() {
                        break;
                    }
                    let count = config.batch_size.min(items - first);
                    let result = if count == config.batch_size {
                        executor.run(&full)
                    } else {
                        let mut part = BatchBuffer::new(count, item_len);
                        for i in 0..count {
                            part.push(i as u64, full.item(i));
                        }
                        executor.run(&part)
                    };
                    if let Err(e) = result {
                        error.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = error.into_inner().expect("lock") {
        return Err(EngineError::Executor(e));
    }
    let started = started.into_inner().expect("consumers ran");
    Ok(items as f64 / started.elapsed().as_secs_f64())
}

/// Where each item left a cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutput {
    /// Index of the stage whose output is final.
    pub exit_stage: usize,
    pub output: ItemOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub outputs: Vec<CascadeOutput>,
    /// `reached[j]` counts items evaluated by stage `j`.
    pub reached: Vec<usize>,
}

/// Runs items through a cascade of models.
///
/// An item whose stage-`j` score is at least `thresholds[j]` passes on to
/// stage `j + 1`; otherwise, or at the last stage, the stage's output is
/// final. `thresholds` needs one entry per non-final stage.
///
/// # Panics
///
/// Panics if `stages` is empty or `thresholds` is shorter than
/// `stages.len() - 1`.
pub fn cascade_execute<T>(items: &[T], stages: &[&dyn Fn(&T) -> ItemOutput], thresholds: &[f64]) -> CascadeResult {
    assert!(!stages.is_empty(), "cascade needs at least one stage");
    assert!(thresholds.len() + 1 >= stages.len(), "one threshold per non-final stage");
    let mut reached = vec![0; stages.len()];
    let outputs = items
        .iter()
        .map(|item| {
            let mut j = 0;
            loop {
                reached[j] += 1;
                let out = stages[j](item);
                if j + 1 == stages.len() || (out.score as f64) < thresholds[j] {
                    return CascadeOutput { exit_stage: j, output: out };
                }
                j += 1;
            }
        })
        .collect();
    CascadeResult { outputs, reached }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EngineConfig::new(2, 2).validate().is_ok());
        let mut c = EngineConfig::new(1, 1);
        c.buffer_pool_size = 2;
        assert!(c.validate().is_err());
        assert!(EngineConfig::new(0, 1).validate().is_err());
    }

    #[test]
    fn batch_buffer_push_and_clear() {
        let mut b = BatchBuffer::new(2, 3);
        assert!(b.push(7, &[1.0, 2.0, 3.0]));
        assert!(b.push(8, &[4.0, 5.0, 6.0]));
        assert!(!b.push(9, &[0.0; 3]));
        assert_eq!(b.item(1), &[4.0, 5.0, 6.0]);
        assert_eq!(b.item_ids(), &[7, 8]);
        b.clear();
        assert_eq!(b.filled(), 0);
    }

    #[test]
    fn pacer_limits_rate() {
        let p = Pacer::new(2000.0, 1);
        let t = Instant::now();
        for _ in 0..10 {
            p.pace(10, Duration::ZERO);
        }
        // 100 items at 2000/s take at least 50 ms minus the idle slack.
        assert!(t.elapsed() >= Duration::from_millis(47), "{:?}", t.elapsed());
    }

    #[test]
    fn cascade_routes_by_threshold() {
        let items: Vec<u32> = (0..1000).collect();
        let first = |x: &u32| ItemOutput { id: *x as u64, score: if x % 10 == 0 { 0.9 } else { 0.1 }, label: 0 };
        let second = |x: &u32| ItemOutput { id: *x as u64, score: 0.5, label: 1 };
        let r = cascade_execute(&items, &[&first, &second], &[0.5]);
        assert_eq!(r.reached, vec![1000, 100]);
        assert_eq!(r.outputs.iter().filter(|o| o.exit_stage == 1).count(), 100);
        let single = cascade_execute(&items, &[&second], &[]);
        assert_eq!(single.reached, vec![1000]);
    }

    #[test]
    fn synthetic_images_are_reproducible() {
        let a = DataSource::synthetic_image(4, 5, 9, 3);
        assert_eq!(a, DataSource::synthetic_image(4, 5, 9, 3));
        assert_ne!(a, DataSource::synthetic_image(4, 5, 9, 4));
    }
}

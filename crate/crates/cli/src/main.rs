use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use visplan::catalog::{generate_plans, load_catalog, Catalog, Codec, DnnProfile, InputFormat};
use visplan::costmodel::{estimation_error, CascadeSpec, CostModel};
use visplan::dagopt::{enumerate_orderings, optimize, plan_cost, Normalization, PreprocGraph};
use visplan::engine::{measure_stage_throughputs, run_pipeline, DataSource, EngineConfig, SyntheticExecutor};
use visplan::jpegdec::{decode_roi_with_stats, decode_rows_with_stats, parse_headers, RoiSpec};
use visplan::planner::{
    dollar_cost, fit_core_price, pareto_frontier, select_plan, Constraint, InstancePricing, PlacementSplit, PlanConfig,
    PlannerError,
};

/// Plans, optimizes and measures image-classification inference pipelines.
#[derive(Parser)]
#[command(name = "visplan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a plan from a catalog, or list the Pareto set.
    Plan(PlanArgs),
    /// Show the cheapest rewrite of the standard preprocessing chain.
    OptimizeDag(DagArgs),
    /// Decode a JPEG, optionally a region or a row prefix.
    Decode(DecodeArgs),
    /// Measure per-stage and end-to-end throughput.
    Bench(BenchArgs),
    /// Compare the throughput cost models against measurements.
    ValidateCostmodel(ValidateArgs),
    /// Price a throughput in cents per million images.
    Cost(CostArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, conflicts_with = "min_throughput")]
    min_accuracy: Option<f64>,
    #[arg(long)]
    min_throughput: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DagArgs {
    #[arg(long, default_value_t = 1080)]
    height: u32,
    #[arg(long, default_value_t = 1920)]
    width: u32,
    /// Short side after the resize.
    #[arg(long, default_value_t = 256)]
    short_side: u32,
    #[arg(long, default_value_t = 224)]
    crop: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    /// Region as left,top,right,bottom (right and bottom exclusive).
    #[arg(long, value_parser = parse_roi, conflicts_with = "rows")]
    roi: Option<RoiSpec>,
    /// Decode only the top N rows.
    #[arg(long)]
    rows: Option<u32>,
    /// Write the pixels as binary PPM (PGM for one channel).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the decoder's work counters as JSON.
    #[arg(long)]
    stats: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of images or a manifest file. Synthetic images otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    count: usize,
    #[arg(long, default_value_t = 375)]
    height: u32,
    #[arg(long, default_value_t = 500)]
    width: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model input side.
    #[arg(long, default_value_t = 224)]
    resolution: u32,
    /// Throughput of the emulated executor, images per second.
    #[arg(long, default_value_t = 4513.0)]
    exec: f64,
    #[arg(long)]
    producers: Option<usize>,
    #[arg(long, default_value_t = 2)]
    consumers: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// CSV with columns name,preproc,exec,measured.
    scenarios: PathBuf,
    /// Measure each scenario on the engine with emulated stage rates.
    #[arg(long)]
    live: bool,
    /// Items per live run; defaults to two seconds at the slower stage.
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Images per second.
    #[arg(long)]
    throughput: f64,
    /// Instance price, dollars per hour.
    #[arg(long)]
    hourly: Option<f64>,
    /// CSV with columns vcpus,hourly_usd; adds a per-core price fit.
    #[arg(long)]
    pricing: Option<PathBuf>,
    /// Take the hourly price from the pricing file row with this many vCPUs.
    #[arg(long, requires = "pricing")]
    vcpus: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct Infeasible(String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::OptimizeDag(a) => cmd_optimize_dag(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ValidateCostmodel(a) => cmd_validate(a),
        Command::Cost(a) => cmd_cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Infeasible>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    emit(out, &serde_json::to_string_pretty(value)?)
}

#[derive(Serialize)]
struct PlanSummary {
    id: String,
    dnns: Vec<String>,
    format: String,
    est_accuracy: f64,
    est_throughput: f64,
    placement: PlacementSplit,
}

impl From<&PlanConfig> for PlanSummary {
    fn from(p: &PlanConfig) -> Self {
        Self {
            id: p.id.clone(),
            dnns: p.dnns.iter().map(|d| d.name.clone()).collect(),
            format: p.format.name.clone(),
            est_accuracy: p.est_accuracy,
            est_throughput: p.est_throughput,
            placement: p.placement,
        }
    }
}

#[derive(Serialize)]
struct PlanReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    constraint: Option<Constraint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected: Option<PlanSummary>,
    pareto: Vec<PlanSummary>,
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let plans = generate_plans(&catalog);
    if plans.is_empty() {
        return Err(Infeasible("the catalog yields no plans".into()).into());
    }
    let pareto = pareto_frontier(&plans).iter().map(PlanSummary::from).collect();
    let constraint = match (a.min_accuracy, a.min_throughput) {
        (Some(acc), _) => Some(Constraint::min_accuracy(acc)),
        (_, Some(thr)) => Some(Constraint::min_throughput(thr)),
        _ => None,
    };
    let selected = match constraint {
        None => None,
        Some(c) => match select_plan(&plans, c) {
            Ok(p) => Some(PlanSummary::from(&p)),
            Err(e @ (PlannerError::Infeasible { .. } | PlannerError::NoPlans)) => {
                return Err(Infeasible(e.to_string()).into())
            }
            Err(e) => return Err(e.into()),
        },
    };
    emit_json(a.out.as_deref(), &PlanReport { constraint, selected, pareto })
}

#[derive(Serialize)]
struct DagReport {
    candidates: usize,
    canonical_cost: u64,
    optimized_cost: u64,
    canonical: PreprocGraph,
    optimized: PreprocGraph,
    summary: String,
}

fn cmd_optimize_dag(a: DagArgs) -> Result<()> {
    let canonical = PreprocGraph::canonical(a.height, a.width, a.short_side, a.crop, Normalization::imagenet())
        .context("building the preprocessing chain")?;
    let optimized = optimize(&canonical);
    let report = DagReport {
        candidates: enumerate_orderings(&canonical).len(),
        canonical_cost: plan_cost(&canonical).arithmetic_ops,
        optimized_cost: plan_cost(&optimized).arithmetic_ops,
        summary: optimized.describe(),
        canonical,
        optimized,
    };
    emit_json(a.out.as_deref(), &report)
}

fn parse_roi(s: &str) -> Result<RoiSpec, String> {
    let parts: Vec<u32> =
        s.split(',').map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [left, top, right, bottom] => Ok(RoiSpec { left, top, right, bottom }),
        _ => Err("expected left,top,right,bottom".into()),
    }
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (img, stats) = match (a.roi, a.rows) {
        (_, Some(rows)) => decode_rows_with_stats(&bytes, rows)?,
        (Some(roi), None) => decode_roi_with_stats(&bytes, roi)?,
        (None, None) => {
            let h = parse_headers(&bytes)?;
            decode_roi_with_stats(&bytes, RoiSpec::full(h.width, h.height))?
        }
    };
    if let Some(path) = &a.out {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        img.write_pnm(io::BufWriter::new(file))?;
    }
    if a.stats {
        emit_json(None, &stats)?;
    } else if a.out.is_none() {
        println!("{}x{}x{}", img.width, img.height, img.channels);
    }
    Ok(())
}

/// A single-model plan over stored images of `height x width`.
fn bench_plan(height: u32, width: u32, resolution: u32, preproc: f64, exec: f64) -> Result<PlanConfig> {
    let dnn = DnnProfile {
        name: "model".into(),
        exec_throughput: exec,
        input_resolution: [resolution, resolution],
        passthrough: 1.0,
        accuracy_by_format: [("input".to_string(), 1.0)].into_iter().collect(),
    };
    let format = InputFormat {
        name: "input".into(),
        codec: Codec::Jpeg,
        short_side: height.min(width),
        long_side: Some(height.max(width)),
        quality: None,
        preproc_throughput: preproc,
        lossless: false,
    };
    let catalog = Catalog::new(vec![dnn], vec![format], vec![], None)?;
    generate_plans(&catalog).pop().context("no plan for the benchmark input")
}

#[derive(Serialize)]
struct BenchRow {
    decode: f64,
    resize: f64,
    normalize: f64,
    execute: f64,
    preproc: f64,
    e2e: f64,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let source = match &a.input {
        Some(p) if p.is_dir() => DataSource::from_dir(p)?,
        Some(p) => DataSource::from_manifest(p)?,
        None => DataSource::Synthetic { count: a.count, height: a.height, width: a.width, seed: a.seed },
    };
    if source.is_empty() {
        return Err(Infeasible("no images to benchmark".into()).into());
    }
    let mut config = EngineConfig::default().with_batch_size(a.batch_size);
    if let Some(p) = a.producers {
        config.producer_count = p;
    }
    config.consumer_count = a.consumers;
    config.buffer_pool_size = config.queue_capacity + config.producer_count + config.consumer_count;
    let plan = bench_plan(a.height, a.width, a.resolution, 1.0, a.exec)?;
    let t = measure_stage_throughputs(&plan, &source, &SyntheticExecutor::new(a.exec), &config)?;

    // Stage seconds are summed over producers, which run side by side.
    let images = t.pipeline.images_processed as f64 * config.producer_count as f64;
    let per = |secs: f64| if secs > 0.0 { images / secs } else { f64::INFINITY };
    let s = t.pipeline.stage_seconds;
    let row = BenchRow {
        decode: per(s.decode),
        resize: per(s.resize + s.crop),
        normalize: per(s.normalize),
        execute: t.exec,
        preproc: t.preproc,
        e2e: t.e2e,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(row)?;
    emit(a.out.as_deref(), &String::from_utf8(w.into_inner()?)?)
}

#[derive(serde::Deserialize)]
struct Scenario {
    name: String,
    preproc: f64,
    exec: f64,
    measured: Option<f64>,
}

#[derive(Serialize)]
struct ValidationRow {
    name: String,
    preproc: f64,
    exec: f64,
    measured: f64,
    exec_only: f64,
    exec_only_error_pct: f64,
    sum: f64,
    sum_error_pct: f64,
    min: f64,
    min_error_pct: f64,
}

fn live_measurement(s: &Scenario, items: Option<usize>) -> Result<f64> {
    let slower = s.preproc.min(s.exec);
    let n = items.unwrap_or_else(|| (2.0 * slower).clamp(500.0, 20_000.0) as usize);
    let plan = bench_plan(16, 16, 8, s.preproc, s.exec)?;
    let source = DataSource::Synthetic { count: n, height: 16, width: 16, seed: 0 };
    let config = EngineConfig::default().with_preproc_rate_limit(s.preproc);
    let run = run_pipeline(&plan, &source, &SyntheticExecutor::new(s.exec), &config)?;
    Ok(run.stats.e2e_throughput)
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&a.scenarios)
        .with_context(|| format!("reading {}", a.scenarios.display()))?;
    let scenarios: Vec<Scenario> = reader.deserialize().collect::<Result<_, _>>().context("parsing scenarios")?;
    if scenarios.is_empty() {
        return Err(Infeasible("the scenario file has no rows".into()).into());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &scenarios {
        if !(s.preproc > 0.0 && s.exec > 0.0) {
            bail!("{}: throughputs must be positive", s.name);
        }
        let measured = match (a.live, s.measured) {
            (true, _) => live_measurement(s, a.items)?,
            (false, Some(m)) if m > 0.0 => m,
            (false, _) => bail!("{}: needs a positive measured value or --live", s.name),
        };
        let cascade = CascadeSpec::single(s.exec)?;
        let est = |m: CostModel| m.estimate(s.preproc, &cascade).value;
        let (exec_only, sum, min) = (est(CostModel::ExecOnly), est(CostModel::Sum), est(CostModel::Min));
        w.serialize(ValidationRow {
            name: s.name.clone(),
            preproc: s.preproc,
            exec: s.exec,
            measured,
            exec_only,
            exec_only_error_pct: estimation_error(exec_only, measured),
            sum,
            sum_error_pct: estimation_error(sum, measured),
            min,
            min_error_pct: estimation_error(min, measured),
        })?;
    }
    emit(a.out.as_deref(), &String::from_utf8(w.into_inner()?)?)
}

#[derive(Serialize)]
struct CostReport {
    throughput: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    hourly_usd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cents_per_million: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<visplan::planner::PriceFit>,
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    if !(a.throughput > 0.0 && a.throughput.is_finite()) {
        bail!("--throughput must be positive");
    }
    let pricing = match &a.pricing {
        Some(path) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Some(InstancePricing::from_csv(file)?)
        }
        None => None,
    };
    let hourly = match (a.hourly, a.vcpus, &pricing) {
        (Some(h), _, _) => Some(h),
        (None, Some(v), Some(p)) => Some(p.price(v).with_context(|| format!("no {v}-vCPU row in the pricing file"))?),
        _ => None,
    };
    if hourly.is_none() && pricing.is_none() {
        bail!("give --hourly, --pricing, or both");
    }
    if let Some(h) = hourly {
        if h.is_nan() || h <= 0.0 {
            bail!("--hourly must be positive");
        }
    }
    let fit = pricing.as_ref().map(fit_core_price).transpose()?;
    let report = CostReport {
        throughput: a.throughput,
        hourly_usd: hourly,
        cents_per_million: hourly.map(|h| dollar_cost(a.throughput, h)),
        fit,
    };
    emit_json(a.out.as_deref(), &report)
}

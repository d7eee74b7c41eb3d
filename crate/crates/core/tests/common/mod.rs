#![allow(dead_code)]

pub mod dag_brute;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use visplan::catalog::{generate_plans, Catalog, Codec, DnnProfile, InputFormat};
use visplan::costmodel::CascadeSpec;
use visplan::engine::{cascade_execute, ItemOutput};
use visplan::planner::PlanConfig;

pub fn jpeg_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/jpeg")
}

pub fn jpeg(name: &str) -> Vec<u8> {
    std::fs::read(jpeg_dir().join(format!("{name}.jpg"))).unwrap()
}

/// A one-model plan on `side x side` stored images feeding a
/// `resolution x resolution` model input.
pub fn plan(side: u32, resolution: u32, preproc: f64, exec: f64) -> PlanConfig {
    let dnn = DnnProfile {
        name: "net".into(),
        exec_throughput: exec,
        input_resolution: [resolution, resolution],
        passthrough: 1.0,
        accuracy_by_format: [("fmt".to_string(), 0.7)].into_iter().collect(),
    };
    let format = InputFormat {
        name: "fmt".into(),
        codec: Codec::Jpeg,
        short_side: side,
        long_side: None,
        quality: Some(90),
        preproc_throughput: preproc,
        lossless: false,
    };
    let catalog = Catalog::new(vec![dnn], vec![format], vec![], None).unwrap();
    generate_plans(&catalog).remove(0)
}

/// Plan for the 16x16 synthetic images the throughput tests use: the real
/// preprocessing work per item is tiny next to the emulated rates.
pub fn tiny_plan(preproc: f64, exec: f64) -> PlanConfig {
    plan(16, 8, preproc, exec)
}

/// Throughput of a cascade measured by pushing `n` items through
/// [`cascade_execute`] and charging each stage `1 / throughput` seconds per
/// item it sees.
///
/// Item `i` draws a stratified uniform `u` in the `i`-th of `n` equal bins and
/// survives to stage `j` while `u < alpha_j`, so stage reach counts are exact
/// to within one item.
pub fn simulate_cascade(cascade: &CascadeSpec, n: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let items: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen::<f64>()) / n as f64).collect();
    let stages = cascade.stages();
    // Rounding the score to f32 can misroute only items within 1e-7 of a
    // threshold.
    let model = |u: &f64| ItemOutput { id: 0, score: (1.0 - u) as f32, label: 0 };
    let models: Vec<&dyn Fn(&f64) -> ItemOutput> =
        stages.iter().map(|_| &model as &dyn Fn(&f64) -> ItemOutput).collect();
    // Stage j forwards an item when 1 - u >= 1 - alpha_{j+1}.
    let thresholds: Vec<f64> = stages.iter().skip(1).map(|s| 1.0 - s.alpha).collect();
    let result = cascade_execute(&items, &models, &thresholds);
    let seconds: f64 = result.reached.iter().zip(stages).map(|(&k, s)| k as f64 / s.exec_throughput).sum();
    (n as f64 / seconds, result.reached)
}

/// One to four models with pass rates in `[0.05, 1]`.
pub fn random_cascade(rng: &mut ChaCha8Rng) -> CascadeSpec {
    let k = rng.gen_range(1..=4);
    let models: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(100.0..20_000.0), rng.gen_range(0.05..=1.0))).collect();
    CascadeSpec::from_pass_rates(&models).unwrap()
}

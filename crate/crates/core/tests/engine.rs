mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use visplan::engine::{
    cascade_execute, run_pipeline, BatchBuffer, DataSource, EngineConfig, EngineError, Executor, ItemOutput,
    SyntheticExecutor,
};
use visplan::jpegdec::decode_full;
use visplan::preproc::{execute, Tensor};

const FREE: f64 = 1e9;

fn synthetic(count: usize) -> DataSource {
    DataSource::Synthetic { count, height: 16, width: 16, seed: 42 }
}

fn sorted_ids(outputs: &[ItemOutput]) -> Vec<u64> {
    let mut ids: Vec<u64> = outputs.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    ids
}

#[test]
fn every_item_runs_exactly_once() {
    let plan = common::tiny_plan(FREE, FREE);
    let exec = SyntheticExecutor::new(FREE);
    let n = 3000;
    let mut reference: Option<Vec<ItemOutput>> = None;
    for producers in [1, 2, 4, 8] {
        for consumers in [1, 2, 4, 8] {
            let config = EngineConfig::new(producers, consumers).with_batch_size(32);
            let run = run_pipeline(&plan, &synthetic(n), &exec, &config).unwrap();
            assert_eq!(sorted_ids(&run.outputs), (0..n as u64).collect::<Vec<_>>(), "{producers}x{consumers}");
            assert_eq!(run.stats.images_processed, n as u64);
            assert_eq!(run.stats.decode_failures, 0);
            let pool = run.stats.pool;
            assert!(pool.allocations <= config.buffer_pool_size && pool.high_water <= config.buffer_pool_size);
            assert_eq!(pool.reallocations, 0);

            let mut outputs = run.outputs;
            outputs.sort_by_key(|o| o.id);
            match &reference {
                None => reference = Some(outputs),
                Some(r) => assert_eq!(&outputs, r, "outputs depend on worker counts"),
            }
        }
    }
}

#[test]
fn outputs_do_not_depend_on_queue_or_batch_size() {
    let plan = common::tiny_plan(FREE, FREE);
    let exec = SyntheticExecutor::new(FREE);
    let run = |config: EngineConfig| {
        let mut out = run_pipeline(&plan, &synthetic(500), &exec, &config).unwrap().outputs;
        out.sort_by_key(|o| o.id);
        out
    };
    let a = run(EngineConfig::new(2, 2));
    assert_eq!(a, run(EngineConfig::new(3, 1).with_queue_capacity(1).with_batch_size(7)));
    assert_eq!(a, run(EngineConfig::new(1, 3).with_queue_capacity(32).with_batch_size(500)));
}

#[test]
fn single_item_flushes_partial_batch() {
    let run = run_pipeline(
        &common::tiny_plan(FREE, FREE),
        &synthetic(1),
        &SyntheticExecutor::new(FREE),
        &EngineConfig::new(2, 2),
    )
    .unwrap();
    assert_eq!(run.stats.images_processed, 1);
    assert_eq!(run.stats.batches, 1);
    assert_eq!(run.outputs.len(), 1);
}

#[test]
fn empty_source_and_bad_config_are_rejected() {
    let plan = common::tiny_plan(FREE, FREE);
    let exec = SyntheticExecutor::new(FREE);
    assert!(matches!(
        run_pipeline(&plan, &synthetic(0), &exec, &EngineConfig::new(1, 1)),
        Err(EngineError::EmptySource)
    ));
    let mut config = EngineConfig::new(1, 1);
    config.buffer_pool_size = 1;
    assert!(matches!(run_pipeline(&plan, &synthetic(5), &exec, &config), Err(EngineError::Config(_))));
}

#[test]
fn decode_failures_are_counted_and_skipped() {
    let plan = common::plan(48, 32, FREE, FREE);
    let good = Arc::new(common::jpeg("s420_64x48"));
    let mut truncated = good[..good.len() / 2].to_vec();
    truncated.extend_from_slice(&[0xFF, 0xD9]);
    let bad = Arc::new(truncated);
    let items: Vec<_> = (0..40).map(|i| if i % 5 == 3 { bad.clone() } else { good.clone() }).collect();
    for (p, c) in [(1, 1), (3, 2)] {
        let run = run_pipeline(
            &plan,
            &DataSource::Encoded(items.clone()),
            &SyntheticExecutor::new(FREE),
            &EngineConfig::new(p, c).with_batch_size(6),
        )
        .unwrap();
        let failed: Vec<u64> = (0..40).filter(|i| i % 5 == 3).collect();
        assert_eq!(run.failed_items, failed);
        assert_eq!(run.stats.decode_failures, 8);
        let expected: Vec<u64> = (0..40).filter(|i| i % 5 != 3).collect();
        assert_eq!(sorted_ids(&run.outputs), expected);
    }
}

#[test]
fn roi_decode_matches_full_decode_pipeline() {
    // Sources of several sizes; each gets its own plan, and the engine
    // decodes only the crop window when the plan crops first.
    let names = ["s420_241x161", "s444_320x240", "s422_200x150", "s420_1080x1920_portrait"];
    let plan = common::plan(161, 64, FREE, FREE);
    let items: Vec<_> = names.iter().map(|n| Arc::new(common::jpeg(n))).collect();
    let run = run_pipeline(
        &plan,
        &DataSource::Encoded(items.clone()),
        &SyntheticExecutor::new(FREE),
        &EngineConfig::new(2, 1),
    )
    .unwrap();
    assert_eq!(run.stats.images_processed, names.len() as u64);
    for o in &run.outputs {
        let img = decode_full(&items[o.id as usize]).unwrap();
        let graph = visplan::catalog::preprocessing_plan_for(img.height, img.width, [64, 64]);
        assert_eq!(graph.steps()[1].op.name(), "crop", "plan should crop before resizing");
        let t = execute(&graph, Tensor::from_image(&img));
        assert_eq!(*o, ItemOutput::from_tensor(o.id, t.as_f32().unwrap()), "{}", names[o.id as usize]);
    }
}

#[test]
fn directory_and_manifest_sources() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["s420_64x48", "s444_64x48", "s422_64x48"].iter().enumerate() {
        std::fs::write(dir.path().join(format!("{i}.jpg")), common::jpeg(name)).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    std::fs::write(dir.path().join("list.txt"), "# two files\n0.jpg\n\n2.jpg\nmissing.jpg\n").unwrap();
    let plan = common::plan(48, 32, FREE, FREE);
    let exec = SyntheticExecutor::new(FREE);

    let source = DataSource::from_dir(dir.path()).unwrap();
    assert_eq!(source.len(), 3);
    let run = run_pipeline(&plan, &source, &exec, &EngineConfig::new(2, 2)).unwrap();
    assert_eq!(sorted_ids(&run.outputs), vec![0, 1, 2]);

    let source = DataSource::from_manifest(dir.path().join("list.txt")).unwrap();
    assert_eq!(source.len(), 3);
    let run = run_pipeline(&plan, &source, &exec, &EngineConfig::new(1, 1)).unwrap();
    assert_eq!(run.failed_items, vec![2]);
    assert_eq!(run.stats.images_processed, 2);
}

struct FailingExecutor {
    calls: AtomicUsize,
}

impl Executor for FailingExecutor {
    fn run(&self, batch: &BatchBuffer) -> Result<Vec<ItemOutput>, String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == 3 {
            return Err("device lost".into());
        }
        Ok(batch.item_ids().iter().map(|&id| ItemOutput { id, score: 0.0, label: 0 }).collect())
    }
}

#[test]
fn executor_failure_aborts_run() {
    let exec = FailingExecutor { calls: AtomicUsize::new(0) };
    let err = run_pipeline(
        &common::tiny_plan(FREE, FREE),
        &synthetic(2000),
        &exec,
        &EngineConfig::new(2, 2).with_batch_size(8),
    )
    .unwrap_err();
    assert_eq!(err.to_string(), "executor failed: device lost");
}

#[test]
fn stats_serialize_as_json_and_csv() {
    let run = run_pipeline(
        &common::tiny_plan(FREE, FREE),
        &synthetic(100),
        &SyntheticExecutor::new(FREE),
        &EngineConfig::new(1, 1),
    )
    .unwrap();
    let json = serde_json::to_string(&run.stats).unwrap();
    let back: visplan::engine::RunStats = serde_json::from_str(&json).unwrap();
    assert_eq!(back, run.stats);
    let csv = run.stats.to_csv();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["stage", "throughput_im_s"]);
    let stages: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(stages, ["preproc", "exec", "e2e"]);
}

#[test]
fn cascade_accuracy_matches_offline_recomputation() {
    // Items carry a ground-truth label and two models' (score, label)
    // predictions; the cheap model is wrong on a tenth of the items.
    let items: Vec<(u32, f32, u32, u32)> = (0..2000u32)
        .map(|i| {
            let truth = i % 7;
            let score = ((i * 37) % 100) as f32 / 100.0;
            let cheap = if i % 10 == 0 { truth + 1 } else { truth };
            (truth, score, cheap, truth)
        })
        .collect();
    let cheap = |x: &(u32, f32, u32, u32)| ItemOutput { id: 0, score: x.1, label: x.2 };
    let target = |x: &(u32, f32, u32, u32)| ItemOutput { id: 0, score: 1.0, label: x.3 };
    let threshold = 0.75;
    let result = cascade_execute(&items, &[&cheap, &target], &[threshold]);
    let correct = result.outputs.iter().zip(&items).filter(|(o, x)| o.output.label == x.0).count();

    let offline = items
        .iter()
        .filter(|x| {
            let label = if (x.1 as f64) < threshold { x.2 } else { x.3 };
            label == x.0
        })
        .count();
    assert_eq!(correct, offline);
    let passing = items.iter().filter(|x| x.1 as f64 >= threshold).count();
    assert_eq!(result.reached, vec![2000, passing]);
}

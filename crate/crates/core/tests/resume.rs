mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anchorframe::backends::{BackendResult, HashEncoder, PairScorer, SamplingParams, StubGenerator, TextGenerator};
use anchorframe::evaluation::{run_experiment, Backends, ExperimentContext, Reuse, Stage, StageLedger, StageStatus};
use anchorframe::screening::EmbeddingCache;

#[derive(Default)]
struct MemoryLedger {
    done: Mutex<BTreeSet<(String, Stage)>>,
    records: AtomicUsize,
}

impl StageLedger for MemoryLedger {
    fn is_complete(&self, task: &str, stage: Stage) -> bool {
        self.done.lock().unwrap().contains(&(task.to_string(), stage))
    }

    fn record(&self, task: &str, stage: Stage, status: StageStatus, _: &[PathBuf], _: u64, _: Option<String>) {
        self.records.fetch_add(1, Ordering::SeqCst);
        if status == StageStatus::Complete {
            self.done.lock().unwrap().insert((task.to_string(), stage));
        }
    }
}

/// Counts calls so the test can tell whether generation reran.
struct CountingGenerator {
    inner: StubGenerator,
    calls: AtomicUsize,
}

impl TextGenerator for CountingGenerator {
    fn name(&self) -> &str {
        "counting"
    }

    fn continue_text(&self, instruction: &str, params: &SamplingParams) -> BackendResult<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.continue_text(instruction, params)
    }
}

#[test]
fn completed_stages_are_reloaded_not_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = common::dataset(12);
    let descriptions = common::descriptions(&dataset);
    let generator = CountingGenerator {
        inner: StubGenerator::new().with_filler(Vec::new()),
        calls: AtomicUsize::new(0),
    };
    let encoder = HashEncoder::new(16);
    let trained = AtomicUsize::new(0);
    let make = || -> BackendResult<Box<dyn PairScorer<f64>>> {
        trained.fetch_add(1, Ordering::SeqCst);
        common::make_scorer()
    };
    let backends = Backends {
        generator: &generator,
        encoder: &encoder,
        make_scorer: &make,
    };
    let settings = common::settings();
    let cache = EmbeddingCache::new();
    let ledger = MemoryLedger::default();
    let plan = common::plan(&dataset, 2, 1, 31);
    let ctx = |reuse| ExperimentContext {
        dataset: &dataset,
        descriptions: &descriptions,
        backends: &backends,
        settings: &settings,
        cache: &cache,
        out_dir: Some(dir.path().to_path_buf()),
        ledger: &ledger,
        scope: String::new(),
        reuse,
        jobs: 1,
    };

    let first = run_experiment(&ctx(Reuse::Nothing), &plan).unwrap();
    let calls_after_first = generator.calls.load(Ordering::SeqCst);
    assert!(calls_after_first > 0);
    // Two tasks, five stages each.
    assert_eq!(ledger.records.load(Ordering::SeqCst), 10);
    let state_path = dir.path().join("run0/task0/scorer_state.json");
    let state_before = std::fs::read(&state_path).unwrap();

    let resumed = run_experiment(&ctx(Reuse::AllCompleted), &plan).unwrap();
    assert_eq!(
        generator.calls.load(Ordering::SeqCst),
        calls_after_first,
        "generation reran"
    );
    assert_eq!(std::fs::read(&state_path).unwrap(), state_before, "scorer retrained");
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&resumed).unwrap()
    );

    // Reusing only generation retrains but reproduces the same state.
    let partial = run_experiment(&ctx(Reuse::CompletedBefore(Stage::Screening)), &plan).unwrap();
    assert_eq!(generator.calls.load(Ordering::SeqCst), calls_after_first);
    assert_eq!(std::fs::read(&state_path).unwrap(), state_before);
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&partial).unwrap()
    );
}

#[test]
fn failed_stage_is_recorded_and_not_marked_complete() {
    let dataset = common::dataset(12);
    let descriptions = common::descriptions(&dataset);
    let generator = StubGenerator::new().offline();
    let encoder = HashEncoder::new(16);
    let backends = Backends {
        generator: &generator,
        encoder: &encoder,
        make_scorer: &common::make_scorer,
    };
    let settings = common::settings();
    let cache = EmbeddingCache::new();
    let ledger = MemoryLedger::default();
    let ctx = ExperimentContext {
        dataset: &dataset,
        descriptions: &descriptions,
        backends: &backends,
        settings: &settings,
        cache: &cache,
        out_dir: None,
        ledger: &ledger,
        scope: String::new(),
        reuse: Reuse::AllCompleted,
        jobs: 1,
    };
    let err = run_experiment(&ctx, &common::plan(&dataset, 1, 1, 1)).unwrap_err();
    assert_eq!(err.stage, Stage::Generation);
    assert_eq!(ledger.records.load(Ordering::SeqCst), 1);
    assert!(!ledger.is_complete("run0/task0", Stage::Generation));
}

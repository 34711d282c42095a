mod common;

use std::collections::BTreeSet;

use anchorframe::backends::StubGenerator;
use anchorframe::corpus::{sample_episode, ClassId};
use anchorframe::evaluation::{
    plan_episode, run_experiment, sweep_anchor_count, task_seed, write_summary_csv, write_sweep_csv, Stage,
};
use anchorframe::prediction::Rule;
use anchorframe::screening::AnchorOrigin;
use common::Harness;

#[test]
fn synthetic_zero_shot_is_solved_by_both_rules() {
    let h = Harness::new(StubGenerator::new());
    let reports = h
        .with_context(&common::settings(), None, 1, |ctx| {
            run_experiment(ctx, &common::plan(&h.dataset, 3, 1, 11))
        })
        .unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.per_task.len(), 3);
        for t in &r.per_task {
            assert_eq!(t.accuracy, 1.0, "{} {}: {:?}", r.rule, t.task, t.confusion);
            assert_eq!(t.weighted_f1, 1.0);
            assert_eq!(t.n_queries, 15);
        }
    }
}

#[test]
fn persisted_task_directory_has_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::new(StubGenerator::new());
    h.with_context(&common::settings(), Some(dir.path().to_path_buf()), 1, |ctx| {
        run_experiment(ctx, &common::plan(&h.dataset, 1, 1, 3))
    })
    .unwrap();
    let task = dir.path().join("run0/task0");
    for f in [
        "episode.json",
        "generated/cooking.jsonl",
        "generated/sports.jsonl",
        "generated/weather.jsonl",
        "generation_stats.json",
        "anchors.jsonl",
        "pairs_train.jsonl",
        "pairs_val.jsonl",
        "train_report.json",
        "scorer_state.json",
        "predictions_top.jsonl",
        "predictions_avg.jsonl",
        "result_top.json",
        "result_avg.json",
    ] {
        assert!(task.join(f).is_file(), "missing {f}");
    }
    let lines = std::fs::read_to_string(task.join("predictions_avg.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 15);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["query_id", "label", "rule", "margin", "per_class_score"] {
        assert!(first.get(key).is_some(), "prediction line lacks {key}");
    }
}

#[test]
fn offline_generator_fails_in_generation_stage() {
    let h = Harness::new(StubGenerator::new().offline());
    let plan = common::plan(&h.dataset, 1, 1, 5);
    let err = h
        .with_context(&common::settings(), None, 1, |ctx| run_experiment(ctx, &plan))
        .unwrap_err();
    assert_eq!(err.stage, Stage::Generation);
    assert_eq!(err.task_seed, task_seed(5, 0, 0));
    assert!(err.to_string().contains("generation"));
}

#[test]
fn too_few_classes_fails_in_episode_stage() {
    let h = Harness::new(StubGenerator::new());
    let mut plan = common::plan(&h.dataset, 1, 1, 5);
    plan.n_way = 4;
    let err = h
        .with_context(&common::settings(), None, 1, |ctx| run_experiment(ctx, &plan))
        .unwrap_err();
    assert_eq!(err.stage, Stage::Episode);
}

#[test]
fn reports_do_not_depend_on_job_count() {
    let h = Harness::new(StubGenerator::new());
    let plan = common::plan(&h.dataset, 4, 2, 21);
    let serial = h
        .with_context(&common::settings(), None, 1, |ctx| run_experiment(ctx, &plan))
        .unwrap();
    let parallel = h
        .with_context(&common::settings(), None, 4, |ctx| run_experiment(ctx, &plan))
        .unwrap();
    assert_eq!(
        serde_json::to_string(&serial).unwrap(),
        serde_json::to_string(&parallel).unwrap()
    );
}

#[test]
fn one_shot_adds_one_support_anchor_per_class() {
    let h = Harness::new(StubGenerator::new());
    let mut plan = common::plan(&h.dataset, 1, 1, 8);
    plan.k_shot = 1;
    plan.n_query = 3;
    let episode = plan_episode(&h.dataset, &plan, 0, 0).unwrap();
    let settings = common::settings();
    let out = h
        .with_context(&settings, None, 1, |ctx| ctx.run_task(&plan, 0, 0))
        .unwrap();
    let collection = out.collection.unwrap();
    assert_eq!(collection.total_anchors(), 3 * (settings.p_count + 1));
    for class in &episode.classes {
        let set = &collection.anchor_sets[class];
        assert_eq!(set.support_anchors, episode.support_texts(class));
    }
    let supports = collection
        .anchors()
        .into_iter()
        .filter(|a| a.origin == AnchorOrigin::Support)
        .count();
    assert_eq!(supports, 3);
}

#[test]
fn episodes_follow_the_plan_seed() {
    let h = Harness::new(StubGenerator::new());
    let plan = common::plan(&h.dataset, 2, 1, 13);
    let a = plan_episode(&h.dataset, &plan, 0, 1).unwrap();
    let b = plan_episode(&h.dataset, &plan, 0, 1).unwrap();
    assert_eq!(a, b);
    let classes: BTreeSet<ClassId> = h.dataset.classes();
    let direct = sample_episode(&h.dataset, &classes, 3, 0, 5, a.seed).unwrap();
    assert_eq!(direct, a);
}

#[test]
fn sweep_writes_one_row_per_count_and_rule() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::new(StubGenerator::new());
    let plan = common::plan(&h.dataset, 1, 1, 2);
    let reports = h
        .with_context(&common::settings(), None, 1, |ctx| {
            sweep_anchor_count(ctx, &plan, &[1, 3])
        })
        .unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(
        reports.iter().map(|r| (r.p_count, r.rule)).collect::<Vec<_>>(),
        vec![
            (1, Rule::TopOne),
            (1, Rule::Average),
            (3, Rule::TopOne),
            (3, Rule::Average)
        ]
    );
    // Same episodes across counts.
    assert_eq!(reports[0].per_task[0].episode_seed, reports[2].per_task[0].episode_seed);

    let sweep = dir.path().join("sweep.csv");
    write_sweep_csv(&sweep, &reports).unwrap();
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().next(), Some("p,rule,mean_acc,mean_f1"));
    assert_eq!(text.lines().count(), 5);

    let summary = dir.path().join("summary.csv");
    write_summary_csv(&summary, &reports).unwrap();
    let text = std::fs::read_to_string(&summary).unwrap();
    assert!(text.starts_with("dataset,n_way,k_shot,p,rule,mean_acc,mean_f1\nsynthetic,3,0,1,top,"));
}

#[test]
fn single_precision_pipeline_runs() {
    use anchorframe::backends::{HashEncoder, LogisticPairScorer, PairScorer};
    use anchorframe::evaluation::{Backends, ExperimentContext, NoLedger, Reuse};
    use anchorframe::screening::EmbeddingCache;

    let dataset = common::dataset(12);
    let descriptions = common::descriptions(&dataset);
    let generator = StubGenerator::new();
    let encoder = HashEncoder::new(16);
    let make = || -> anchorframe::backends::BackendResult<Box<dyn PairScorer<f32>>> {
        Ok(Box::new(LogisticPairScorer::<f32>::new(common::SCORER_DIM)))
    };
    let backends = Backends {
        generator: &generator,
        encoder: &encoder,
        make_scorer: &make,
    };
    let settings = common::settings();
    let cache = EmbeddingCache::<f32>::new();
    let ctx = ExperimentContext {
        dataset: &dataset,
        descriptions: &descriptions,
        backends: &backends,
        settings: &settings,
        cache: &cache,
        out_dir: None,
        ledger: &NoLedger,
        scope: String::new(),
        reuse: Reuse::Nothing,
        jobs: 1,
    };
    let reports = run_experiment(&ctx, &common::plan(&dataset, 1, 1, 11)).unwrap();
    assert!(reports.iter().all(|r| r.mean_acc >= 0.0f32 && r.mean_acc <= 1.0));
}

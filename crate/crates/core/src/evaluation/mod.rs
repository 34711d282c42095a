//! Metrics, the per-task pipeline, and multi-task experiments.

pub mod metrics;
pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode, ClassId, Dataset, EpisodeTask};
use crate::generation::ClassDescription;
use crate::prediction::Rule;
use crate::scalar::Scalar;
use crate::screening::EmbeddingCache;
use crate::seed::derive_seed;

pub use metrics::{accuracy, macro_f1, order_invariant_mean, weighted_f1, Confusion, MetricError};
pub use pipeline::{
    read_task_result, Backends, NoLedger, PipelineError, PipelineSettings, PredictionRecord, Reuse, ScorerFactory,
    Stage, StageLedger, StageStatus, TaskOutput, TaskRunner, TaskSeeds,
};

/// Metrics of one episode under one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TaskResult<T> {
    /// Task key, `run{r}/task{t}`.
    pub task: String,
    pub episode_seed: u64,
    pub rule: Rule,
    pub accuracy: T,
    pub weighted_f1: T,
    pub n_queries: usize,
    pub confusion: Confusion,
}

/// Aggregate over all tasks and runs of one configuration and rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExperimentReport<T> {
    pub dataset: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub p_count: usize,
    pub rule: Rule,
    pub per_task: Vec<TaskResult<T>>,
    pub mean_acc: T,
    pub mean_f1: T,
    pub n_runs: usize,
}

impl<T: Scalar> ExperimentReport<T> {
    /// Recomputes the means from `per_task`.
    pub fn from_tasks(
        dataset: &str,
        n_way: usize,
        k_shot: usize,
        p_count: usize,
        rule: Rule,
        n_runs: usize,
        per_task: Vec<TaskResult<T>>,
    ) -> Self {
        let accs: Vec<T> = per_task.iter().map(|r| r.accuracy).collect();
        let f1s: Vec<T> = per_task.iter().map(|r| r.weighted_f1).collect();
        ExperimentReport {
            dataset: dataset.to_string(),
            n_way,
            k_shot,
            p_count,
            rule,
            mean_acc: order_invariant_mean(&accs),
            mean_f1: order_invariant_mean(&f1s),
            per_task,
            n_runs,
        }
    }
}

/// Shape of an experiment: which classes, how many episodes, which seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Candidate classes, usually the test partition.
    pub classes: BTreeSet<ClassId>,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_tasks: usize,
    pub n_runs: usize,
    pub master_seed: u64,
}

impl ExperimentPlan {
    pub fn task_keys(&self) -> Vec<(usize, usize)> {
        (0..self.n_runs)
            .flat_map(|r| (0..self.n_tasks).map(move |t| (r, t)))
            .collect()
    }
}

pub fn task_key(run: usize, task: usize) -> String {
    format!("run{run}/task{task}")
}

fn scoped(scope: &str, key: &str) -> String {
    if scope.is_empty() {
        key.to_string()
    } else {
        format!("{scope}/{key}")
    }
}

/// Seed of task `task` in run `run`.
pub fn task_seed(master: u64, run: usize, task: usize) -> u64 {
    derive_seed(master, &task_key(run, task))
}

/// The episode of task `(run, task)`; a pure function of the plan.
pub fn plan_episode(
    dataset: &Dataset,
    plan: &ExperimentPlan,
    run: usize,
    task: usize,
) -> Result<EpisodeTask, PipelineError> {
    let seed = task_seed(plan.master_seed, run, task);
    sample_episode(
        dataset,
        &plan.classes,
        plan.n_way,
        plan.k_shot,
        plan.n_query,
        TaskSeeds(seed).episode(),
    )
    .map_err(|e| PipelineError::new(Stage::Episode, seed, e))
}

/// Everything an experiment needs besides the plan.
pub struct ExperimentContext<'a, T: Scalar> {
    pub dataset: &'a Dataset,
    pub descriptions: &'a BTreeMap<ClassId, ClassDescription>,
    pub backends: &'a Backends<'a, T>,
    pub settings: &'a PipelineSettings,
    pub cache: &'a EmbeddingCache<T>,
    /// Root for per-task directories; nothing is persisted when `None`.
    pub out_dir: Option<PathBuf>,
    pub ledger: &'a dyn StageLedger,
    /// Prefix for ledger keys, so that several experiments (for example
    /// the points of a sweep) can share one ledger. Empty for none.
    pub scope: String,
    pub reuse: Reuse,
    /// Worker threads; forced to one when a backend is not shareable.
    pub jobs: usize,
}

impl<T: Scalar> ExperimentContext<'_, T> {
    /// Ledger key of task `(run, task)`, including the scope.
    pub fn key(&self, run: usize, task: usize) -> String {
        scoped(&self.scope, &task_key(run, task))
    }

    fn task_dir(&self, run: usize, task: usize) -> Option<PathBuf> {
        self.out_dir
            .as_ref()
            .map(|d| d.join(format!("run{run}")).join(format!("task{task}")))
    }

    /// Runs one task through every stage.
    pub fn run_task(&self, plan: &ExperimentPlan, run: usize, task: usize) -> Result<TaskOutput<T>, PipelineError> {
        self.run_task_until(plan, run, task, Stage::Prediction)
    }

    /// Runs one task through the stages up to and including `until`.
    pub fn run_task_until(
        &self,
        plan: &ExperimentPlan,
        run: usize,
        task: usize,
        until: Stage,
    ) -> Result<TaskOutput<T>, PipelineError> {
        let episode = plan_episode(self.dataset, plan, run, task)?;
        TaskRunner {
            episode: &episode,
            descriptions: self.descriptions,
            backends: self.backends,
            settings: self.settings,
            cache: self.cache,
            task_seed: task_seed(plan.master_seed, run, task),
            key: self.key(run, task),
            dir: self.task_dir(run, task),
            ledger: self.ledger,
        }
        .run(until, self.reuse)
    }
}

/// Runs every task of `plan` up to `until`, returning outputs in
/// `(run, task)` order regardless of `jobs`. Stops at the first failure.
pub fn run_tasks<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    plan: &ExperimentPlan,
    until: Stage,
) -> Result<Vec<TaskOutput<T>>, PipelineError> {
    let keys = plan.task_keys();
    let jobs = if ctx.backends.concurrent() {
        ctx.jobs.clamp(1, keys.len().max(1))
    } else {
        if ctx.jobs > 1 {
            log::warn!("a backend is not shareable across threads; running tasks serially");
        }
        1
    };

    type Slot<T> = Mutex<Option<Result<TaskOutput<T>, PipelineError>>>;
    let slots: Vec<Slot<T>> = keys.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= keys.len() || failed.load(Ordering::SeqCst) {
            break;
        }
        let (run, task) = keys[i];
        log::info!("running {} until {until}", ctx.key(run, task));
        let res = ctx.run_task_until(plan, run, task, until);
        if res.is_err() {
            failed.store(true, Ordering::SeqCst);
        }
        *slots[i].lock().expect("slot lock") = Some(res);
    };
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut outputs = Vec::with_capacity(keys.len());
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(out)) => outputs.push(out),
            Some(Err(e)) => return Err(e),
            // skipped after another task failed; that error is returned above
            None => {}
        }
    }
    Ok(outputs)
}

/// Runs every task of `plan` and aggregates one report per rule.
///
/// Results are gathered in `(run, task)` order regardless of `jobs`, so the
/// reports do not depend on scheduling.
pub fn run_experiment<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    plan: &ExperimentPlan,
) -> Result<Vec<ExperimentReport<T>>, PipelineError> {
    let results = run_tasks(ctx, plan, Stage::Prediction)?
        .into_iter()
        .flat_map(|o| o.results)
        .collect();
    Ok(reports_from_results(&ctx.dataset.name, plan, ctx.settings, results))
}

/// Groups per-task results into one report per configured rule.
pub fn reports_from_results<T: Scalar>(
    dataset: &str,
    plan: &ExperimentPlan,
    settings: &PipelineSettings,
    results: Vec<TaskResult<T>>,
) -> Vec<ExperimentReport<T>> {
    let mut by_rule: BTreeMap<Rule, Vec<TaskResult<T>>> = BTreeMap::new();
    for r in results {
        by_rule.entry(r.rule).or_default().push(r);
    }
    settings
        .rules
        .iter()
        .map(|&rule| {
            ExperimentReport::from_tasks(
                dataset,
                plan.n_way,
                plan.k_shot,
                settings.p_count,
                rule,
                plan.n_runs,
                by_rule.remove(&rule).unwrap_or_default(),
            )
        })
        .collect()
}

/// Repeats the experiment for each anchor count. Episodes and every stage
/// seed are shared across counts; only P changes. Each count writes under
/// `out_dir/p{P}`.
pub fn sweep_anchor_count<T: Scalar>(
    ctx: &ExperimentContext<'_, T>,
    plan: &ExperimentPlan,
    p_values: &[usize],
) -> Result<Vec<ExperimentReport<T>>, PipelineError> {
    let mut reports = Vec::new();
    for &p in p_values {
        let settings = PipelineSettings {
            p_count: p,
            ..ctx.settings.clone()
        };
        let sub = ExperimentContext {
            dataset: ctx.dataset,
            descriptions: ctx.descriptions,
            backends: ctx.backends,
            settings: &settings,
            cache: ctx.cache,
            out_dir: ctx.out_dir.as_ref().map(|d| d.join(format!("p{p}"))),
            ledger: ctx.ledger,
            scope: scoped(&ctx.scope, &format!("p{p}")),
            reuse: ctx.reuse,
            jobs: ctx.jobs,
        };
        reports.extend(run_experiment(&sub, plan)?);
    }
    Ok(reports)
}

/// Writes `dataset,n_way,k_shot,p,rule,mean_acc,mean_f1`, one row per report.
pub fn write_summary_csv<T: Scalar>(path: &Path, reports: &[ExperimentReport<T>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "n_way", "k_shot", "p", "rule", "mean_acc", "mean_f1"])?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.n_way.to_string(),
            r.k_shot.to_string(),
            r.p_count.to_string(),
            r.rule.short_name().to_string(),
            r.mean_acc.as_f64().to_string(),
            r.mean_f1.as_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `p,rule,mean_acc,mean_f1`, one row per report.
pub fn write_sweep_csv<T: Scalar>(path: &Path, reports: &[ExperimentReport<T>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["p", "rule", "mean_acc", "mean_f1"])?;
    for r in reports {
        w.write_record([
            r.p_count.to_string(),
            r.rule.short_name().to_string(),
            r.mean_acc.as_f64().to_string(),
            r.mean_f1.as_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

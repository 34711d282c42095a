//! One episode end to end: generate, screen, reframe + train, predict.
//!
//! Each stage can persist its outputs under a task directory and report to a
//! [`StageLedger`]; a later invocation may reload completed stages instead
//! of recomputing them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{accuracy, weighted_f1, Confusion};
use super::TaskResult;
use crate::backends::{
    BackendResult, Concurrency, PairScorer, SamplingParams, TextEncoder, TextGenerator, TrainConfig, TrainReport,
};
use crate::corpus::{ClassId, EpisodeTask};
use crate::generation::{
    default_max_attempts, generate_class_samples, read_samples_jsonl, write_samples_jsonl, ClassDescription,
    GeneratedSample, GenerationStats, DEFAULT_END_MARKERS,
};
use crate::prediction::{predict, score_query, Prediction, Rule, TestAnchors};
use crate::reframing::{build_pair_dataset, split_validation, write_pairs_jsonl, LossMode};
use crate::scalar::Scalar;
use crate::screening::{
    merge_supports, read_anchor_store, screen_class, write_anchor_store, AnchorCollection, EmbeddingCache,
    SelectionMode,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Episode,
    Generation,
    Screening,
    Training,
    Prediction,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Episode,
        Stage::Generation,
        Stage::Screening,
        Stage::Training,
        Stage::Prediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Episode => "episode",
            Stage::Generation => "generation",
            Stage::Screening => "screening",
            Stage::Training => "training",
            Stage::Prediction => "prediction",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed for task seed {task_seed}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub task_seed: u64,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: Stage, task_seed: u64, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        PipelineError {
            stage,
            task_seed,
            source: source.into(),
        }
    }
}

/// Every knob of a task run that is not a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub sampling: SamplingParams,
    /// Samples requested per class.
    pub target_count: usize,
    /// Defaults to three times `target_count`.
    pub max_attempts: Option<usize>,
    pub end_markers: Vec<char>,
    /// Generated anchors per class (P).
    pub p_count: usize,
    pub selection_temperature: f64,
    pub selection_mode: SelectionMode,
    pub epsilon: f64,
    pub include_self_pairs: bool,
    pub negative_ratio: Option<f64>,
    pub n_val: usize,
    pub train: TrainConfig,
    pub test_anchors: TestAnchors,
    pub rules: Vec<Rule>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            sampling: SamplingParams::default(),
            target_count: 1000,
            max_attempts: None,
            end_markers: DEFAULT_END_MARKERS.to_vec(),
            p_count: 20,
            selection_temperature: 1.0,
            selection_mode: SelectionMode::Softmax,
            epsilon: 0.1,
            include_self_pairs: true,
            negative_ratio: None,
            n_val: 100,
            train: TrainConfig::default(),
            test_anchors: TestAnchors::Full,
            rules: vec![Rule::TopOne, Rule::Average],
        }
    }
}

impl PipelineSettings {
    /// All range violations, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.sampling.validate() {
            errs.push(format!("sampling: {e}"));
        }
        if let Err(e) = self.train.validate() {
            errs.push(format!("train: {e}"));
        }
        if self.target_count == 0 {
            errs.push("target_count must be at least 1".into());
        }
        if let Some(m) = self.max_attempts {
            if m < self.target_count {
                errs.push(format!("max_attempts {m} is below target_count {}", self.target_count));
            }
        }
        if self.end_markers.is_empty() {
            errs.push("end_markers must not be empty".into());
        }
        if self.p_count == 0 {
            errs.push("p_count must be at least 1".into());
        }
        if !(self.selection_temperature > 0.0 && self.selection_temperature.is_finite()) {
            errs.push(format!(
                "selection_temperature {} must be positive",
                self.selection_temperature
            ));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            errs.push(format!("epsilon {} must lie in [0, 1)", self.epsilon));
        } else if self.epsilon == 0.0 && self.train.loss == LossMode::ForwardKl {
            errs.push("epsilon must be positive with loss forward_kl".into());
        }
        if let Some(r) = self.negative_ratio {
            if r.is_nan() || r <= 0.0 {
                errs.push(format!("negative_ratio {r} must be positive"));
            }
        }
        if self.rules.is_empty() {
            errs.push("at least one prediction rule is required".into());
        }
        errs
    }

    pub fn max_attempts(&self) -> usize {
        self.max_attempts
            .unwrap_or_else(|| default_max_attempts(self.target_count))
    }
}

/// Factory producing a fresh, untrained scorer per task.
pub type ScorerFactory<'a, T> = dyn Fn() -> BackendResult<Box<dyn PairScorer<T>>> + Send + Sync + 'a;

pub struct Backends<'a, T: Scalar> {
    pub generator: &'a dyn TextGenerator,
    pub encoder: &'a dyn TextEncoder<T>,
    pub make_scorer: &'a ScorerFactory<'a, T>,
}

impl<T: Scalar> Backends<'_, T> {
    /// Whether tasks may run on several threads at once.
    pub fn concurrent(&self) -> bool {
        let probe = (self.make_scorer)()
            .map(|s| s.concurrency())
            .unwrap_or(Concurrency::Serialized);
        self.generator.concurrency() == Concurrency::Shared
            && self.encoder.concurrency() == Concurrency::Shared
            && probe == Concurrency::Shared
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Failed,
}

/// Persistent record of stage completion, keyed by task.
pub trait StageLedger: Sync {
    fn is_complete(&self, task: &str, stage: Stage) -> bool;
    fn record(
        &self,
        task: &str,
        stage: Stage,
        status: StageStatus,
        outputs: &[PathBuf],
        seed: u64,
        note: Option<String>,
    );
}

/// Ledger that remembers nothing.
pub struct NoLedger;

impl StageLedger for NoLedger {
    fn is_complete(&self, _: &str, _: Stage) -> bool {
        false
    }

    fn record(&self, _: &str, _: Stage, _: StageStatus, _: &[PathBuf], _: u64, _: Option<String>) {}
}

/// Which completed stages may be reloaded instead of recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reuse {
    Nothing,
    AllCompleted,
    CompletedBefore(Stage),
}

impl Reuse {
    fn allows(self, stage: Stage) -> bool {
        match self {
            Reuse::Nothing => false,
            Reuse::AllCompleted => true,
            Reuse::CompletedBefore(limit) => stage < limit,
        }
    }
}

/// Per-stage seeds derived from the task seed.
#[derive(Debug, Clone, Copy)]
pub struct TaskSeeds(pub u64);

impl TaskSeeds {
    pub fn episode(self) -> u64 {
        derive_seed(self.0, "episode")
    }

    pub fn generation(self, class: &ClassId) -> u64 {
        derive_seed(self.0, &format!("generation/{class}"))
    }

    pub fn screening(self, class: &ClassId) -> u64 {
        derive_seed(self.0, &format!("screening/{class}"))
    }

    pub fn pairs(self) -> u64 {
        derive_seed(self.0, "pairs")
    }

    pub fn validation(self) -> u64 {
        derive_seed(self.0, "validation")
    }

    pub fn training(self) -> u64 {
        derive_seed(self.0, "training")
    }
}

/// One prediction line: `{query_id, label, rule, margin, per_class_score}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PredictionRecord<T> {
    pub query_id: usize,
    pub label: ClassId,
    pub rule: Rule,
    pub margin: Option<T>,
    pub per_class_score: BTreeMap<ClassId, T>,
}

impl<T: Scalar> PredictionRecord<T> {
    fn from_prediction(query_id: usize, p: Prediction<T>) -> Self {
        PredictionRecord {
            query_id,
            label: p.label,
            rule: p.rule,
            margin: p.margin,
            per_class_score: p.per_class_score,
        }
    }
}

#[derive(Debug, Default)]
pub struct TaskOutput<T: Scalar> {
    pub generated: BTreeMap<ClassId, Vec<GeneratedSample>>,
    pub generation_stats: BTreeMap<ClassId, GenerationStats>,
    pub collection: Option<AnchorCollection>,
    pub train_report: Option<TrainReport>,
    pub predictions: BTreeMap<Rule, Vec<PredictionRecord<T>>>,
    pub results: Vec<TaskResult<T>>,
}

pub(crate) fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    fs::write(path, bytes)
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<S> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(std::io::Error::other)
}

/// Runs one episode through the pipeline.
pub struct TaskRunner<'a, T: Scalar> {
    pub episode: &'a EpisodeTask,
    pub descriptions: &'a BTreeMap<ClassId, ClassDescription>,
    pub backends: &'a Backends<'a, T>,
    pub settings: &'a PipelineSettings,
    pub cache: &'a EmbeddingCache<T>,
    /// Seed from which every stage seed is derived.
    pub task_seed: u64,
    /// Ledger key, e.g. `run0/task3`.
    pub key: String,
    pub dir: Option<PathBuf>,
    pub ledger: &'a dyn StageLedger,
}

impl<T: Scalar> TaskRunner<'_, T> {
    fn seeds(&self) -> TaskSeeds {
        TaskSeeds(self.task_seed)
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn fail(&self, stage: Stage, e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> PipelineError {
        let err = PipelineError::new(stage, self.task_seed, e);
        self.ledger.record(
            &self.key,
            stage,
            StageStatus::Failed,
            &[],
            self.task_seed,
            Some(err.source.to_string()),
        );
        err
    }

    fn reusable(&self, stage: Stage, reuse: Reuse) -> bool {
        self.dir.is_some() && reuse.allows(stage) && self.ledger.is_complete(&self.key, stage)
    }

    /// Runs stages up to and including `until`.
    pub fn run(&self, until: Stage, reuse: Reuse) -> Result<TaskOutput<T>, PipelineError> {
        let mut out = TaskOutput::default();
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir.join("generated")).map_err(|e| self.fail(Stage::Episode, e))?;
            let path = dir.join("episode.json");
            write_json(&path, &self.episode.dump()).map_err(|e| self.fail(Stage::Episode, e))?;
            self.ledger.record(
                &self.key,
                Stage::Episode,
                StageStatus::Complete,
                &[path],
                self.task_seed,
                None,
            );
        }

        if self.reusable(Stage::Generation, reuse) {
            self.load_generation(&mut out)
                .map_err(|e| self.fail(Stage::Generation, e))?;
        } else {
            self.generate(&mut out)?;
        }
        if until == Stage::Generation {
            return Ok(out);
        }

        let collection = if self.reusable(Stage::Screening, reuse) {
            read_anchor_store(&self.path("anchors.jsonl").expect("dir set"))
                .map_err(|e| self.fail(Stage::Screening, e))?
        } else {
            self.screen(&out.generated)?
        };
        out.collection = Some(collection.clone());
        if until == Stage::Screening {
            return Ok(out);
        }

        let mut scorer = (self.backends.make_scorer)().map_err(|e| self.fail(Stage::Training, e))?;
        if self.reusable(Stage::Training, reuse) {
            let state: serde_json::Value = read_json(&self.path("scorer_state.json").expect("dir set"))
                .map_err(|e| self.fail(Stage::Training, e))?;
            scorer.import_state(&state).map_err(|e| self.fail(Stage::Training, e))?;
            out.train_report = Some(
                read_json(&self.path("train_report.json").expect("dir set"))
                    .map_err(|e| self.fail(Stage::Training, e))?,
            );
        } else {
            out.train_report = Some(self.train(&collection, scorer.as_mut())?);
        }
        if until == Stage::Training {
            return Ok(out);
        }

        self.predict(&collection, scorer.as_ref(), &mut out)?;
        Ok(out)
    }

    fn load_generation(&self, out: &mut TaskOutput<T>) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
        let dir = self.dir.as_ref().expect("dir set");
        for class in &self.episode.classes {
            let path = dir
                .join("generated")
                .join(format!("{}.jsonl", file_safe(class.as_str())));
            out.generated.insert(class.clone(), read_samples_jsonl(&path)?);
        }
        out.generation_stats = read_json(&dir.join("generation_stats.json"))?;
        Ok(())
    }

    fn generate(&self, out: &mut TaskOutput<T>) -> Result<(), PipelineError> {
        let stage = Stage::Generation;
        let mut outputs = Vec::new();
        for class in &self.episode.classes {
            let desc = self
                .descriptions
                .get(class)
                .ok_or_else(|| self.fail(stage, format!("no description for class `{class}`")))?;
            let params = self.settings.sampling.with_seed(self.seeds().generation(class));
            let outcome = generate_class_samples(
                self.backends.generator,
                desc,
                self.settings.target_count,
                &params,
                self.settings.max_attempts(),
                &self.settings.end_markers,
            )
            .map_err(|e| self.fail(stage, e))?;
            if let Some(dir) = &self.dir {
                let path = dir
                    .join("generated")
                    .join(format!("{}.jsonl", file_safe(class.as_str())));
                write_samples_jsonl(&path, &outcome.samples).map_err(|e| self.fail(stage, e))?;
                outputs.push(path);
            }
            out.generated.insert(class.clone(), outcome.samples);
            out.generation_stats.insert(class.clone(), outcome.stats);
        }
        if let Some(path) = self.path("generation_stats.json") {
            write_json(&path, &out.generation_stats).map_err(|e| self.fail(stage, e))?;
            outputs.push(path);
        }
        self.ledger
            .record(&self.key, stage, StageStatus::Complete, &outputs, self.task_seed, None);
        Ok(())
    }

    fn screen(&self, generated: &BTreeMap<ClassId, Vec<GeneratedSample>>) -> Result<AnchorCollection, PipelineError> {
        let stage = Stage::Screening;
        let mut sets = Vec::new();
        for class in &self.episode.classes {
            let samples = generated
                .get(class)
                .ok_or_else(|| self.fail(stage, format!("no generated samples for `{class}`")))?;
            let (set, _) = screen_class(
                class,
                samples,
                self.backends.encoder,
                self.cache,
                self.settings.p_count,
                T::lit(self.settings.selection_temperature),
                self.settings.selection_mode,
                self.seeds().screening(class),
            )
            .map_err(|e| self.fail(stage, e))?;
            sets.push(merge_supports(set, self.episode.support_texts(class)));
        }
        let collection = AnchorCollection::new(sets);
        let mut outputs = Vec::new();
        if let Some(path) = self.path("anchors.jsonl") {
            write_anchor_store(&path, &collection).map_err(|e| self.fail(stage, e))?;
            outputs.push(path);
        }
        self.ledger
            .record(&self.key, stage, StageStatus::Complete, &outputs, self.task_seed, None);
        Ok(collection)
    }

    fn train(
        &self,
        collection: &AnchorCollection,
        scorer: &mut dyn PairScorer<T>,
    ) -> Result<TrainReport, PipelineError> {
        let stage = Stage::Training;
        let pairs = build_pair_dataset::<T>(
            collection,
            T::lit(self.settings.epsilon),
            self.settings.include_self_pairs,
            self.settings.negative_ratio,
            self.seeds().pairs(),
        )
        .map_err(|e| self.fail(stage, e))?;
        let n_val = if self.settings.n_val >= pairs.len() {
            let clamped = pairs.len() / 2;
            log::warn!(
                "only {} pairs; validation set shrunk from {} to {clamped}",
                pairs.len(),
                self.settings.n_val
            );
            clamped
        } else {
            self.settings.n_val
        };
        let (train, val) =
            split_validation(&pairs, n_val, self.seeds().validation()).map_err(|e| self.fail(stage, e))?;
        let config = TrainConfig {
            seed: self.seeds().training(),
            ..self.settings.train.clone()
        };
        let report = scorer.train(&train, &config, &val).map_err(|e| self.fail(stage, e))?;
        let mut outputs = Vec::new();
        if let Some(dir) = &self.dir {
            let write = || -> Result<Vec<PathBuf>, Box<dyn std::error::Error + Send + Sync>> {
                let files = [
                    dir.join("pairs_train.jsonl"),
                    dir.join("pairs_val.jsonl"),
                    dir.join("train_report.json"),
                    dir.join("scorer_state.json"),
                ];
                write_pairs_jsonl(&files[0], &train)?;
                write_pairs_jsonl(&files[1], &val)?;
                write_json(&files[2], &report)?;
                write_json(&files[3], &scorer.export_state()?)?;
                Ok(files.to_vec())
            };
            outputs = write().map_err(|e| self.fail(stage, e))?;
        }
        self.ledger
            .record(&self.key, stage, StageStatus::Complete, &outputs, self.task_seed, None);
        Ok(report)
    }

    fn predict(
        &self,
        collection: &AnchorCollection,
        scorer: &dyn PairScorer<T>,
        out: &mut TaskOutput<T>,
    ) -> Result<(), PipelineError> {
        let stage = Stage::Prediction;
        let test_collection = match self.settings.test_anchors {
            TestAnchors::Full => collection.clone(),
            TestAnchors::GeneratedOnly => collection.generated_only(),
        };
        let mut confusions: BTreeMap<Rule, Confusion> = self
            .settings
            .rules
            .iter()
            .map(|&r| (r, Confusion::with_labels(self.episode.classes.iter().cloned())))
            .collect();
        for (qid, q) in self.episode.queries.iter().enumerate() {
            let scores = score_query(&q.text, &test_collection, scorer).map_err(|e| self.fail(stage, e))?;
            for &rule in &self.settings.rules {
                let p = predict(&scores, rule).map_err(|e| self.fail(stage, e))?;
                confusions
                    .get_mut(&rule)
                    .expect("rule registered")
                    .add(q.label.clone(), p.label.clone());
                out.predictions
                    .entry(rule)
                    .or_default()
                    .push(PredictionRecord::from_prediction(qid, p));
            }
        }
        let mut outputs = Vec::new();
        for (rule, confusion) in confusions {
            let result = TaskResult {
                task: self.key.clone(),
                episode_seed: self.episode.seed,
                rule,
                accuracy: accuracy(&confusion).map_err(|e| self.fail(stage, e))?,
                weighted_f1: weighted_f1(&confusion).map_err(|e| self.fail(stage, e))?,
                n_queries: confusion.total(),
                confusion,
            };
            if let Some(dir) = &self.dir {
                let pred_path = dir.join(format!("predictions_{}.jsonl", rule.short_name()));
                let lines: String = out.predictions[&rule]
                    .iter()
                    .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
                    .collect();
                fs::write(&pred_path, lines).map_err(|e| self.fail(stage, e))?;
                let result_path = dir.join(format!("result_{}.json", rule.short_name()));
                write_json(&result_path, &result).map_err(|e| self.fail(stage, e))?;
                outputs.push(pred_path);
                outputs.push(result_path);
            }
            out.results.push(result);
        }
        self.ledger
            .record(&self.key, stage, StageStatus::Complete, &outputs, self.task_seed, None);
        Ok(())
    }
}

/// Reads a persisted task result.
pub fn read_task_result<T: Scalar>(dir: &Path, rule: Rule) -> std::io::Result<TaskResult<T>> {
    read_json(&dir.join(format!("result_{}.json", rule.short_name())))
}

//! Model capabilities consumed by the pipeline.
//!
//! The pipeline needs three independent networks: an autoregressive text
//! generator, a sentence encoder, and a trainable pair scorer. Each is a
//! trait object so real adapters and the deterministic stubs in [`stub`] and
//! [`logistic`] can be mixed freely. Adapters register under string keys in
//! a [`registry::BackendRegistry`] and are selected by name from config.
//!
//! Real-model adapters live outside this crate. The reference setup pairs a
//! GPT2-XL-sized generator (~1.5B parameters) with a BERT-base-sized
//! encoder (~110M parameters) fine-tuned as the pair scorer.

pub mod logistic;
pub mod registry;
pub mod sampling;
pub mod stub;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reframing::{LossMode, PairDataset};
use crate::scalar::Scalar;

pub use logistic::LogisticPairScorer;
pub use registry::{BackendRegistry, BackendSpec};
pub use stub::{HashEncoder, OracleScorer, StubGenerator};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("input of {len} tokens exceeds the context limit of {limit}")]
    ContextOverflow { limit: usize, len: usize },
    #[error("scorer must be trained before scoring")]
    NotTrained,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("backend produced an invalid output: {0}")]
    InvalidOutput(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
}

impl BackendError {
    /// Transient failures the caller may retry.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// Whether a backend tolerates concurrent calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Shared,
    Serialized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            top_p: 0.9,
            top_k: 40,
            max_new_tokens: 30,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> BackendResult<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidConfig(format!(
                "top_p {} not in (0, 1]",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(BackendError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams { seed, ..self.clone() }
    }
}

/// Sentence-level embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding<T> {
    pub vector: Vec<T>,
    /// The input exceeded the encoder limit and was cut.
    #[serde(default)]
    pub truncated: bool,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(vector: Vec<T>) -> Self {
        Embedding {
            vector,
            truncated: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }
}

/// Two-way normalized output of a pair scorer: `v0` is the same-class
/// component, `v1` the different-class component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector<T> {
    pub v0: T,
    pub v1: T,
}

impl<T: Scalar> SimilarityVector<T> {
    /// Checked constructor enforcing non-negativity and unit sum.
    pub fn new(v0: T, v1: T) -> BackendResult<Self> {
        let sv = SimilarityVector { v0, v1 };
        sv.check()?;
        Ok(sv)
    }

    /// Softmax over two logits.
    pub fn from_logits(z0: T, z1: T) -> Self {
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let s = e0 + e1;
        SimilarityVector { v0: e0 / s, v1: e1 / s }
    }

    pub fn check(&self) -> BackendResult<()> {
        let ok = self.v0.is_finite()
            && self.v1.is_finite()
            && self.v0 >= T::zero()
            && self.v1 >= T::zero()
            && ((self.v0 + self.v1).as_f64() - 1.0).abs() <= NORMALIZATION_TOLERANCE;
        if ok {
            Ok(())
        } else {
            Err(BackendError::InvalidOutput(format!(
                "similarity vector [{}, {}] is not normalized",
                self.v0, self.v1
            )))
        }
    }

    /// Scalar similarity score `v0 - v1`.
    pub fn score(&self) -> T {
        self.v0 - self.v1
    }

    pub fn predicts_match(&self) -> bool {
        self.v0 > self.v1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            weight_decay: 0.01,
            warmup_proportion: 0.1,
            max_epochs: 20,
            early_stop_patience: 3,
            batch_size: 32,
            seed: 0,
            loss: LossMode::ForwardKl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> BackendResult<()> {
        let bad = |m: String| Err(BackendError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad(format!("warmup_proportion {} not in [0, 1]", self.warmup_proportion));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return bad("max_epochs, early_stop_patience and batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    NotTrainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation set is empty.
    pub val_accuracy: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scorer: String,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

pub trait TextGenerator: Send + Sync {
    fn name(&self) -> &str;

    /// Samples a continuation of `instruction`; the instruction itself is not
    /// part of the output.
    fn continue_text(&self, instruction: &str, params: &SamplingParams) -> BackendResult<String>;

    /// Token count under the generator's own tokenizer.
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait TextEncoder<T: Scalar>: Send + Sync {
    /// Stable identifier; embedding caches key on it.
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// One embedding per input, in order. Pure for a fixed instance.
    fn embed(&self, texts: &[String]) -> BackendResult<Vec<Embedding<T>>>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait PairScorer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn is_trained(&self) -> bool;

    /// Scores the ordered pair `(text_a, text_b)`. Callers should go through
    /// [`score_pair`], which enforces the output contract.
    fn score(&self, text_a: &str, text_b: &str) -> BackendResult<SimilarityVector<T>>;

    fn train(
        &mut self,
        pairs: &PairDataset<T>,
        config: &TrainConfig,
        validation: &PairDataset<T>,
    ) -> BackendResult<TrainReport>;

    /// Serializable snapshot of trained parameters, for resumable runs.
    fn export_state(&self) -> BackendResult<serde_json::Value>;

    fn import_state(&mut self, state: &serde_json::Value) -> BackendResult<()>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// Scores a pair, rejecting untrained scorers and unnormalized outputs.
pub fn score_pair<T: Scalar>(
    scorer: &dyn PairScorer<T>,
    text_a: &str,
    text_b: &str,
) -> BackendResult<SimilarityVector<T>> {
    if !scorer.is_trained() {
        return Err(BackendError::NotTrained);
    }
    let v = scorer.score(text_a, text_b)?;
    v.check()?;
    Ok(v)
}

/// Fraction of pairs whose predicted match flag equals the target's.
/// `None` for an empty set.
pub fn pair_accuracy<T: Scalar>(scorer: &dyn PairScorer<T>, pairs: &PairDataset<T>) -> BackendResult<Option<f64>> {
    if pairs.pairs.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for p in &pairs.pairs {
        let v = score_pair(scorer, &p.text_a, &p.text_b)?;
        if v.predicts_match() == p.target.matched {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / pairs.pairs.len() as f64))
}

/// Lowercased alphanumeric tokens, shared by the stub backends.
pub(crate) fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

//! Few-shot and zero-shot text classification from label descriptions.
//!
//! A generator writes pseudo samples from each class description. A
//! prototype-based screen keeps the most representative ones as anchors.
//! Classification then becomes pairwise: a trained scorer rates how well a
//! query matches each anchor, and a decision rule turns those ratings into a
//! label.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`.

pub mod backends;
pub mod corpus;
pub mod evaluation;
pub mod generation;
pub mod prediction;
pub mod reframing;
pub mod scalar;
pub mod screening;
pub mod seed;

pub use backends::{
    BackendError, BackendRegistry, BackendSpec, Concurrency, PairScorer, SamplingParams, TextEncoder, TextGenerator,
    TrainConfig, TrainReport,
};
pub use corpus::{ClassId, Dataset, EpisodeTask};
pub use evaluation::{
    run_experiment, sweep_anchor_count, ExperimentContext, ExperimentPlan, PipelineError, PipelineSettings, Stage,
};
pub use generation::{ClassDescription, GeneratedSample, InstructionTemplate};
pub use prediction::Rule;
pub use reframing::LossMode;
pub use scalar::Scalar;
pub use screening::{AnchorCollection, AnchorSet};

pub type Embedding = backends::Embedding<f64>;
pub type SimilarityVector = backends::SimilarityVector<f64>;
pub type TargetIndicator = reframing::TargetIndicator<f64>;
pub type AnchorPair = reframing::AnchorPair<f64>;
pub type PairDataset = reframing::PairDataset<f64>;
pub type Prototype = screening::Prototype<f64>;
pub type EmbeddingCache = screening::EmbeddingCache<f64>;
pub type QueryScores = prediction::QueryScores<f64>;
pub type Prediction = prediction::Prediction<f64>;
pub type TaskResult = evaluation::TaskResult<f64>;
pub type ExperimentReport = evaluation::ExperimentReport<f64>;
pub type LogisticPairScorer = backends::LogisticPairScorer<f64>;

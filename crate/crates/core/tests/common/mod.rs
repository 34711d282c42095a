//! Synthetic three-class corpus and stub backends shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use anchorframe::backends::stub::LabelNoise;
use anchorframe::backends::{
    BackendResult, HashEncoder, LogisticPairScorer, PairScorer, SamplingParams, StubGenerator, TrainConfig,
};
use anchorframe::corpus::{ClassId, Dataset, Record};
use anchorframe::evaluation::{Backends, ExperimentContext, ExperimentPlan, NoLedger, PipelineSettings, Reuse};
use anchorframe::generation::{ClassDescription, InstructionTemplate};
use anchorframe::prediction::Rule;
use anchorframe::screening::EmbeddingCache;

pub const CLASSES: [(&str, &str); 3] = [
    ("cooking", "pasta recipe bake sauce"),
    ("sports", "football tennis match goal"),
    ("weather", "rain storm cloud wind"),
];

pub const TEMPLATE: &str = "Topic {description}: \"";

/// Wide enough that no two fixture words share a hash bucket.
pub const SCORER_DIM: usize = 256;

/// Queries built from description words, `per_class` per class.
pub fn dataset(per_class: usize) -> Dataset {
    let mut records = Vec::new();
    let mut descriptions = BTreeMap::new();
    for (id, desc) in CLASSES {
        let words: Vec<&str> = desc.split_whitespace().collect();
        for i in 0..per_class {
            let a = words[i % words.len()];
            let b = words[(i / words.len() + i + 1) % words.len()];
            records.push(Record {
                text: format!("{a} {b}"),
                label: ClassId::from(id),
            });
        }
        descriptions.insert(ClassId::from(id), desc.to_string());
    }
    Dataset::new("synthetic", records, descriptions).expect("valid fixture")
}

pub fn descriptions(dataset: &Dataset) -> BTreeMap<ClassId, ClassDescription> {
    let template = InstructionTemplate::new("synthetic", TEMPLATE).expect("valid template");
    dataset
        .classes()
        .into_iter()
        .map(|c| {
            let d = ClassDescription::new(c.clone(), dataset.description(&c).unwrap(), &template).unwrap();
            (c, d)
        })
        .collect()
}

pub fn settings() -> PipelineSettings {
    PipelineSettings {
        // Nucleus filtering would drop each class's rarest description word,
        // leaving queries built from it without a matching anchor.
        sampling: SamplingParams {
            top_p: 1.0,
            temperature: 3.0,
            max_new_tokens: 8,
            ..SamplingParams::default()
        },
        target_count: 40,
        p_count: 10,
        n_val: 20,
        train: TrainConfig {
            learning_rate: 0.05,
            warmup_proportion: 0.0,
            max_epochs: 30,
            early_stop_patience: 10,
            batch_size: 16,
            ..TrainConfig::default()
        },
        rules: vec![Rule::TopOne, Rule::Average],
        ..PipelineSettings::default()
    }
}

pub fn plan(dataset: &Dataset, n_tasks: usize, n_runs: usize, master_seed: u64) -> ExperimentPlan {
    ExperimentPlan {
        classes: dataset.classes(),
        n_way: 3,
        k_shot: 0,
        n_query: 5,
        n_tasks,
        n_runs,
        master_seed,
    }
}

/// Words of every class, the pool for injected off-class generations.
pub fn noise_pool() -> Vec<String> {
    CLASSES
        .iter()
        .flat_map(|(_, d)| d.split_whitespace().map(String::from))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn noisy_generator(rate: f64) -> StubGenerator {
    StubGenerator::new().with_noise(LabelNoise {
        rate,
        pool: noise_pool(),
    })
}

pub fn make_scorer() -> BackendResult<Box<dyn PairScorer<f64>>> {
    Ok(Box::new(LogisticPairScorer::<f64>::new(SCORER_DIM)))
}

/// Owns the stub backends so tests can borrow an [`ExperimentContext`].
pub struct Harness {
    pub dataset: Dataset,
    pub descriptions: BTreeMap<ClassId, ClassDescription>,
    pub generator: StubGenerator,
    pub encoder: HashEncoder,
    pub cache: EmbeddingCache<f64>,
}

impl Harness {
    pub fn new(generator: StubGenerator) -> Self {
        let generator = generator.with_filler(Vec::new());
        let dataset = dataset(12);
        let descriptions = descriptions(&dataset);
        Harness {
            dataset,
            descriptions,
            generator,
            encoder: HashEncoder::new(16),
            cache: EmbeddingCache::new(),
        }
    }

    pub fn with_context<R>(
        &self,
        settings: &PipelineSettings,
        out_dir: Option<std::path::PathBuf>,
        jobs: usize,
        f: impl FnOnce(&ExperimentContext<'_, f64>) -> R,
    ) -> R {
        let backends = Backends {
            generator: &self.generator,
            encoder: &self.encoder,
            make_scorer: &make_scorer,
        };
        let ctx = ExperimentContext {
            dataset: &self.dataset,
            descriptions: &self.descriptions,
            backends: &backends,
            settings,
            cache: &self.cache,
            out_dir,
            ledger: &NoLedger,
            scope: String::new(),
            reuse: Reuse::Nothing,
            jobs,
        };
        f(&ctx)
    }
}

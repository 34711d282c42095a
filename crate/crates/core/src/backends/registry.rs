//! Name-keyed backend factories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stub::LabelNoise;
use super::{
    BackendError, BackendResult, HashEncoder, LogisticPairScorer, OracleScorer, PairScorer, StubGenerator, TextEncoder,
    TextGenerator,
};
use crate::scalar::Scalar;

/// Backend name plus free-form parameters passed to its factory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

impl BackendSpec {
    pub fn named(name: &str) -> Self {
        BackendSpec {
            name: name.to_string(),
            params: serde_json::Value::Null,
        }
    }
}

type GeneratorFactory = Box<dyn Fn(&serde_json::Value) -> BackendResult<Box<dyn TextGenerator>> + Send + Sync>;
type EncoderFactory<T> = Box<dyn Fn(&serde_json::Value) -> BackendResult<Box<dyn TextEncoder<T>>> + Send + Sync>;
type ScorerFactory<T> = Box<dyn Fn(&serde_json::Value) -> BackendResult<Box<dyn PairScorer<T>>> + Send + Sync>;

pub struct BackendRegistry<T: Scalar> {
    generators: BTreeMap<String, GeneratorFactory>,
    encoders: BTreeMap<String, EncoderFactory<T>>,
    scorers: BTreeMap<String, ScorerFactory<T>>,
}

fn params<P: for<'de> Deserialize<'de> + Default>(value: &serde_json::Value) -> BackendResult<P> {
    if value.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(value.clone()).map_err(|e| BackendError::InvalidConfig(e.to_string()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StubGeneratorParams {
    #[serde(default)]
    canned: Vec<CannedEntry>,
    filler: Option<Vec<String>>,
    noise: Option<LabelNoise>,
    context_limit: Option<usize>,
    #[serde(default)]
    offline: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CannedEntry {
    instruction: String,
    seed: u64,
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DimParams {
    dim: usize,
    max_tokens: usize,
}

impl Default for DimParams {
    fn default() -> Self {
        DimParams {
            dim: 16,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OracleParams {
    epsilon: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { epsilon: 0.1 }
    }
}

impl<T: Scalar> Default for BackendRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Scalar> BackendRegistry<T> {
    pub fn empty() -> Self {
        BackendRegistry {
            generators: BTreeMap::new(),
            encoders: BTreeMap::new(),
            scorers: BTreeMap::new(),
        }
    }

    /// Registry with the stub backends: generator `stub`, encoder
    /// `stub-hash`, scorers `stub-logistic` and `stub-oracle`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_generator("stub", |v| {
            let p: StubGeneratorParams = params(v)?;
            let mut g = StubGenerator::new();
            for c in &p.canned {
                g = g.with_canned(&c.instruction, c.seed, &c.text);
            }
            if let Some(f) = p.filler {
                g = g.with_filler(f);
            }
            if let Some(n) = p.noise {
                g = g.with_noise(n);
            }
            if let Some(l) = p.context_limit {
                g = g.with_context_limit(l);
            }
            if p.offline {
                g = g.offline();
            }
            Ok(Box::new(g))
        });
        r.register_encoder("stub-hash", |v| {
            let p: DimParams = params(v)?;
            Ok(Box::new(HashEncoder::new(p.dim).with_max_tokens(p.max_tokens)))
        });
        r.register_scorer("stub-logistic", |v| {
            let p: DimParams = params(v)?;
            Ok(Box::new(LogisticPairScorer::<T>::new(p.dim)))
        });
        r.register_scorer("stub-oracle", |v| {
            let p: OracleParams = params(v)?;
            Ok(Box::new(OracleScorer::new(p.epsilon)))
        });
        r
    }

    pub fn register_generator<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&serde_json::Value) -> BackendResult<Box<dyn TextGenerator>> + Send + Sync + 'static,
    {
        self.generators.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_encoder<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&serde_json::Value) -> BackendResult<Box<dyn TextEncoder<T>>> + Send + Sync + 'static,
    {
        self.encoders.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_scorer<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&serde_json::Value) -> BackendResult<Box<dyn PairScorer<T>>> + Send + Sync + 'static,
    {
        self.scorers.insert(name.to_string(), Box::new(factory));
    }

    pub fn generator(&self, spec: &BackendSpec) -> BackendResult<Box<dyn TextGenerator>> {
        let f = self
            .generators
            .get(&spec.name)
            .ok_or_else(|| BackendError::UnknownBackend(spec.name.clone()))?;
        f(&spec.params)
    }

    pub fn encoder(&self, spec: &BackendSpec) -> BackendResult<Box<dyn TextEncoder<T>>> {
        let f = self
            .encoders
            .get(&spec.name)
            .ok_or_else(|| BackendError::UnknownBackend(spec.name.clone()))?;
        f(&spec.params)
    }

    pub fn scorer(&self, spec: &BackendSpec) -> BackendResult<Box<dyn PairScorer<T>>> {
        let f = self
            .scorers
            .get(&spec.name)
            .ok_or_else(|| BackendError::UnknownBackend(spec.name.clone()))?;
        f(&spec.params)
    }

    pub fn generator_names(&self) -> Vec<&str> {
        self.generators.keys().map(String::as_str).collect()
    }

    pub fn encoder_names(&self) -> Vec<&str> {
        self.encoders.keys().map(String::as_str).collect()
    }

    pub fn scorer_names(&self) -> Vec<&str> {
        self.scorers.keys().map(String::as_str).collect()
    }
}

//! Deterministic stand-ins for the generator, the encoder and the scorer.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sampling::{filter_top_k_top_p, sample_index, softmax_with_temperature};
use super::{
    word_tokens, BackendError, BackendResult, Embedding, PairScorer, SamplingParams, SimilarityVector, StopReason,
    TextEncoder, TextGenerator, TrainConfig, TrainReport,
};
use crate::reframing::PairDataset;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed};

/// With probability `rate`, a fallback sample draws its words from `pool`
/// instead of from the instruction. Used to simulate off-class generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoise {
    pub rate: f64,
    pub pool: Vec<String>,
}

/// Table-driven generator.
///
/// A continuation is looked up by `(instruction, seed)`; on a miss a seeded
/// sampler draws words from the instruction's own vocabulary (plus a small
/// filler list), applies temperature / top-k / top-p, glues a closing `"`
/// to the last content word, and may append a short tail. The marker is
/// always within `max_new_tokens` whitespace tokens.
#[derive(Debug, Clone)]
pub struct StubGenerator {
    canned: HashMap<(String, u64), String>,
    filler: Vec<String>,
    noise: Option<LabelNoise>,
    context_limit: usize,
    offline: bool,
}

impl Default for StubGenerator {
    fn default() -> Self {
        StubGenerator {
            canned: HashMap::new(),
            filler: vec!["so".into(), "then".into(), "now".into()],
            noise: None,
            context_limit: 1024,
            offline: false,
        }
    }
}

impl StubGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_canned(mut self, instruction: &str, seed: u64, continuation: &str) -> Self {
        self.canned
            .insert((instruction.to_string(), seed), continuation.to_string());
        self
    }

    /// Registers `continuations[i]` under seed `base_seed + i`.
    pub fn with_canned_sequence<S: AsRef<str>>(
        mut self,
        instruction: &str,
        base_seed: u64,
        continuations: &[S],
    ) -> Self {
        for (i, c) in continuations.iter().enumerate() {
            self.canned.insert(
                (instruction.to_string(), base_seed.wrapping_add(i as u64)),
                c.as_ref().to_string(),
            );
        }
        self
    }

    pub fn with_filler(mut self, filler: Vec<String>) -> Self {
        self.filler = filler;
        self
    }

    pub fn with_noise(mut self, noise: LabelNoise) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit;
        self
    }

    /// Every call fails with a retryable error.
    pub fn offline(mut self) -> Self {
        self.offline = true;
        self
    }

    fn sample_fallback(&self, instruction: &str, params: &SamplingParams) -> String {
        let mut rng = rng_from_seed(derive_seed(params.seed, instruction));
        let noisy = match &self.noise {
            Some(n) if !n.pool.is_empty() => rng.gen::<f64>() < n.rate,
            _ => false,
        };
        let mut vocab: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        let source: Vec<String> = if noisy {
            self.noise.as_ref().map(|n| n.pool.clone()).unwrap_or_default()
        } else {
            word_tokens(instruction)
                .into_iter()
                .chain(self.filler.iter().cloned())
                .collect()
        };
        for w in source {
            if seen.insert(w.clone()) {
                vocab.push(w);
            }
        }
        if vocab.is_empty() {
            vocab.push("ok".into());
        }

        // Zipf-shaped logits over a hash-determined ranking of the vocabulary.
        let mut ranked: Vec<usize> = (0..vocab.len()).collect();
        ranked.sort_by_key(|&i| derive_seed(0, &vocab[i]));
        let mut logits = vec![0.0f64; vocab.len()];
        for (rank, &i) in ranked.iter().enumerate() {
            logits[i] = -((rank + 1) as f64).ln();
        }
        let probs = softmax_with_temperature(&logits, params.temperature);
        let probs = filter_top_k_top_p(&probs, params.top_k, params.top_p);

        let budget = params.max_new_tokens;
        let content_len = rng.gen_range(1..=budget);
        let tail_len = rng.gen_range(0..=(budget - content_len).min(3));
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let i = sample_index(&probs, rng).unwrap_or(0);
            vocab[i].clone()
        };
        let mut words: Vec<String> = (0..content_len).map(|_| draw(&mut rng)).collect();
        if let Some(last) = words.last_mut() {
            last.push('"');
        }
        for _ in 0..tail_len {
            let w = self.filler.get(rng.gen_range(0..self.filler.len().max(1))).cloned();
            words.push(w.unwrap_or_else(|| draw(&mut rng)));
        }
        words.join(" ")
    }
}

impl TextGenerator for StubGenerator {
    fn name(&self) -> &str {
        "stub"
    }

    fn continue_text(&self, instruction: &str, params: &SamplingParams) -> BackendResult<String> {
        if self.offline {
            return Err(BackendError::Unavailable("stub generator is offline".into()));
        }
        if instruction.trim().is_empty() {
            return Err(BackendError::InvalidConfig("empty instruction".into()));
        }
        params.validate()?;
        let len = self.count_tokens(instruction);
        if len > self.context_limit {
            return Err(BackendError::ContextOverflow {
                limit: self.context_limit,
                len,
            });
        }
        let out = match self.canned.get(&(instruction.to_string(), params.seed)) {
            Some(text) => {
                if self.count_tokens(text) > params.max_new_tokens {
                    text.split_whitespace()
                        .take(params.max_new_tokens)
                        .collect::<Vec<_>>()
                        .join(" ")
                } else {
                    text.clone()
                }
            }
            None => self.sample_fallback(instruction, params),
        };
        Ok(out)
    }
}

/// Hashed bag-of-words encoder: each token adds ±1 to one of `dim`
/// buckets (bucket and sign from SHA-256 of the token), and the result is
/// scaled to unit length.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    id: String,
    dim: usize,
    max_tokens: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        HashEncoder::new(16)
    }
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        HashEncoder {
            id: format!("stub-hash-d{dim}"),
            dim: dim.max(1),
            max_tokens: 512,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    fn bucket(&self, token: &str) -> (usize, bool) {
        let digest = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(b) % self.dim as u64) as usize;
        (bucket, digest[8] & 1 == 1)
    }

    pub fn embed_one<T: Scalar>(&self, text: &str) -> Embedding<T> {
        let tokens = word_tokens(text);
        let truncated = tokens.len() > self.max_tokens;
        let mut v = vec![T::zero(); self.dim];
        for t in tokens.iter().take(self.max_tokens) {
            let (b, negative) = self.bucket(t);
            v[b] = if negative { v[b] - T::one() } else { v[b] + T::one() };
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::zero() {
            v.iter_mut().for_each(|x| *x = *x / norm);
        }
        Embedding { vector: v, truncated }
    }
}

impl<T: Scalar> TextEncoder<T> for HashEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> BackendResult<Vec<Embedding<T>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Extracts a `[[tag]]` class tag from a text.
pub fn class_tag(text: &str) -> Option<&str> {
    let start = text.find("[[")? + 2;
    let len = text[start..].find("]]")?;
    Some(&text[start..start + len])
}

pub fn tag_text(tag: &str, text: &str) -> String {
    format!("[[{tag}]] {text}")
}

/// Scorer that reads `[[tag]]` markers: equal tags score
/// `[1 - eps/2, eps/2]`, different tags the reverse, untagged input
/// `[0.5, 0.5]`. Needs no training.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    epsilon: f64,
}

impl OracleScorer {
    pub fn new(epsilon: f64) -> Self {
        OracleScorer { epsilon }
    }
}

impl<T: Scalar> PairScorer<T> for OracleScorer {
    fn name(&self) -> &str {
        "stub-oracle"
    }

    fn is_trained(&self) -> bool {
        true
    }

    fn score(&self, text_a: &str, text_b: &str) -> BackendResult<SimilarityVector<T>> {
        let half = T::lit(self.epsilon / 2.0);
        let v = match (class_tag(text_a), class_tag(text_b)) {
            (Some(a), Some(b)) if a == b => SimilarityVector {
                v0: T::one() - half,
                v1: half,
            },
            (Some(_), Some(_)) => SimilarityVector {
                v0: half,
                v1: T::one() - half,
            },
            _ => SimilarityVector {
                v0: T::lit(0.5),
                v1: T::lit(0.5),
            },
        };
        Ok(v)
    }

    fn train(
        &mut self,
        pairs: &PairDataset<T>,
        config: &TrainConfig,
        validation: &PairDataset<T>,
    ) -> BackendResult<TrainReport> {
        if pairs.pairs.is_empty() {
            return Err(BackendError::EmptyTrainingSet);
        }
        Ok(TrainReport {
            scorer: "stub-oracle".into(),
            epochs: Vec::new(),
            stop_reason: StopReason::NotTrainable,
            seed: config.seed,
            n_train: pairs.pairs.len(),
            n_val: validation.pairs.len(),
        })
    }

    fn export_state(&self) -> BackendResult<serde_json::Value> {
        Ok(serde_json::json!({ "epsilon": self.epsilon }))
    }

    fn import_state(&mut self, state: &serde_json::Value) -> BackendResult<()> {
        if let Some(e) = state.get("epsilon").and_then(|v| v.as_f64()) {
            self.epsilon = e;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::score_pair;

    #[test]
    fn generator_is_deterministic() {
        let g = StubGenerator::new();
        let p = SamplingParams {
            seed: 42,
            ..Default::default()
        };
        let a = g.continue_text("Here is news about sports: \"", &p).unwrap();
        let b = g.continue_text("Here is news about sports: \"", &p).unwrap();
        assert_eq!(a, b);
        let c = g
            .continue_text("Here is news about sports: \"", &p.with_seed(43))
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_token_budget() {
        let g = StubGenerator::new().with_canned("say \"", 1, "one two three");
        for seed in 0..50 {
            let p = SamplingParams {
                max_new_tokens: 1,
                seed,
                ..Default::default()
            };
            let out = g.continue_text("say \"", &p).unwrap();
            assert!(g.count_tokens(&out) <= 1, "{out}");
        }
    }

    #[test]
    fn fallback_always_closes_quote_in_budget() {
        let g = StubGenerator::new();
        for seed in 0..200 {
            let p = SamplingParams {
                max_new_tokens: 1 + (seed as usize % 7),
                seed,
                ..Default::default()
            };
            let out = g.continue_text("If I want to play music, I will say \"", &p).unwrap();
            assert!(out.contains('"'));
            assert!(g.count_tokens(&out) <= p.max_new_tokens);
        }
    }

    #[test]
    fn canned_continuation_verbatim() {
        let g = StubGenerator::new().with_canned("x \"", 7, "play some jazz music\" extra");
        let p = SamplingParams {
            seed: 7,
            ..Default::default()
        };
        assert_eq!(g.continue_text("x \"", &p).unwrap(), "play some jazz music\" extra");
    }

    #[test]
    fn context_overflow_names_limit() {
        let g = StubGenerator::new().with_context_limit(3);
        let err = g.continue_text("a b c d \"", &SamplingParams::default()).unwrap_err();
        assert!(matches!(err, BackendError::ContextOverflow { limit: 3, len: 5 }));
    }

    #[test]
    fn offline_generator_is_retryable() {
        let err = StubGenerator::new()
            .offline()
            .continue_text("a \"", &SamplingParams::default())
            .unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn encoder_purity_and_shape() {
        let enc = HashEncoder::default();
        let texts = vec!["play some jazz".to_string(), "play some jazz".to_string()];
        let out: Vec<Embedding<f64>> = enc.embed(&texts).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].dim(), 16);
        let norm: f64 = out[0].vector.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let empty: Vec<Embedding<f64>> = enc.embed(&[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn encoder_separates_distinct_tokens() {
        let enc = HashEncoder::default();
        let a: Embedding<f64> = enc.embed_one("aa");
        let b: Embedding<f64> = enc.embed_one("ab");
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn encoder_flags_truncation() {
        let enc = HashEncoder::new(8).with_max_tokens(2);
        let e: Embedding<f32> = enc.embed_one("one two three");
        assert!(e.truncated);
        let e: Embedding<f32> = enc.embed_one("one two");
        assert!(!e.truncated);
    }

    #[test]
    fn oracle_rule() {
        let s = OracleScorer::new(0.1);
        let v: SimilarityVector<f64> = score_pair(&s, "[[a]] hi", "[[a]] yo").unwrap();
        assert!((v.v0 - 0.95).abs() < 1e-6 && (v.v1 - 0.05).abs() < 1e-6);
        let v: SimilarityVector<f64> = score_pair(&s, "[[a]] hi", "[[b]] yo").unwrap();
        assert!(v.v0 < v.v1);
        assert!((v.v0 + v.v1 - 1.0).abs() < 1e-6);
        assert_eq!(class_tag("no tag"), None);
    }
}

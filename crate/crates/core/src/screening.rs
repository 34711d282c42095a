//! Anchor screening: per-class prototypes over generated-sample embeddings,
//! distance-weighted anchor sampling, and support merging.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, Embedding, TextEncoder};
use crate::corpus::ClassId;
use crate::generation::GeneratedSample;
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("cannot compute a prototype of zero embeddings")]
    EmptyEmbeddings,
    #[error("embedding {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("distance of embedding {0} to the prototype is not finite")]
    NonFiniteDistance(usize),
    #[error("temperature {0} must be positive")]
    BadTemperature(f64),
    #[error("p_count must be at least 1")]
    ZeroAnchorCount,
    #[error("{samples} samples but {embeddings} embeddings")]
    LengthMismatch { samples: usize, embeddings: usize },
    #[error("encoder failed: {0}")]
    Backend(#[from] BackendError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed anchor store {path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Sample without replacement from `softmax(-distance / temperature)`.
    #[default]
    Softmax,
    /// Take the `P` closest samples.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype<T> {
    pub class_id: ClassId,
    pub vector: Vec<T>,
    pub n_members: usize,
}

impl<T: Scalar> Prototype<T> {
    pub fn new(class_id: ClassId, embeddings: &[Embedding<T>]) -> Result<Self, ScreeningError> {
        Ok(Prototype {
            class_id,
            vector: compute_prototype(embeddings)?,
            n_members: embeddings.len(),
        })
    }
}

fn check_dims<T: Scalar>(embeddings: &[Embedding<T>], expected: usize) -> Result<(), ScreeningError> {
    for (index, e) in embeddings.iter().enumerate() {
        if e.dim() != expected {
            return Err(ScreeningError::DimensionMismatch {
                index,
                expected,
                found: e.dim(),
            });
        }
    }
    Ok(())
}

/// Componentwise mean.
pub fn compute_prototype<T: Scalar>(embeddings: &[Embedding<T>]) -> Result<Vec<T>, ScreeningError> {
    let first = embeddings.first().ok_or(ScreeningError::EmptyEmbeddings)?;
    let d = first.dim();
    check_dims(embeddings, d)?;
    let mut sum = vec![T::zero(); d];
    for e in embeddings {
        for (s, &x) in sum.iter_mut().zip(&e.vector) {
            *s = *s + x;
        }
    }
    let n = T::from_usize_lossy(embeddings.len());
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// `p_i ∝ exp(-‖e_i - prototype‖ / temperature)`.
pub fn selection_distribution<T: Scalar>(
    embeddings: &[Embedding<T>],
    prototype: &[T],
    temperature: T,
) -> Result<Vec<T>, ScreeningError> {
    if embeddings.is_empty() {
        return Err(ScreeningError::EmptyEmbeddings);
    }
    if !(temperature > T::zero() && temperature.is_finite()) {
        return Err(ScreeningError::BadTemperature(temperature.as_f64()));
    }
    check_dims(embeddings, prototype.len())?;
    let mut logits = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let d = euclidean(&e.vector, prototype);
        if !d.is_finite() {
            return Err(ScreeningError::NonFiniteDistance(i));
        }
        logits.push(-d / temperature);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = weights.iter().copied().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Picks `min(p_count, samples.len())` anchors. In softmax mode the draw is
/// without replacement, each step proportional to the remaining
/// probabilities; with `p_count >= samples.len()` every sample is returned
/// in input order.
pub fn select_anchors<T: Scalar>(
    samples: &[GeneratedSample],
    embeddings: &[Embedding<T>],
    prototype: &[T],
    p_count: usize,
    temperature: T,
    seed: u64,
    mode: SelectionMode,
) -> Result<Vec<GeneratedSample>, ScreeningError> {
    if p_count == 0 {
        return Err(ScreeningError::ZeroAnchorCount);
    }
    if samples.len() != embeddings.len() {
        return Err(ScreeningError::LengthMismatch {
            samples: samples.len(),
            embeddings: embeddings.len(),
        });
    }
    if samples.len() <= p_count {
        return Ok(samples.to_vec());
    }
    let chosen: Vec<usize> = match mode {
        SelectionMode::Softmax => {
            let probs = selection_distribution(embeddings, prototype, temperature)?;
            let idx: Vec<usize> = (0..samples.len()).collect();
            let mut rng = rng_from_seed(seed);
            idx.choose_multiple_weighted(&mut rng, p_count, |&i| probs[i].as_f64())
                .map_err(|_| ScreeningError::NonFiniteDistance(0))?
                .copied()
                .collect()
        }
        SelectionMode::Nearest => {
            check_dims(embeddings, prototype.len())?;
            let mut dist: Vec<(T, usize)> = Vec::with_capacity(embeddings.len());
            for (i, e) in embeddings.iter().enumerate() {
                let d = euclidean(&e.vector, prototype);
                if !d.is_finite() {
                    return Err(ScreeningError::NonFiniteDistance(i));
                }
                dist.push((d, i));
            }
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dist.into_iter().take(p_count).map(|(_, i)| i).collect()
        }
    };
    Ok(chosen.into_iter().map(|i| samples[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub class_id: ClassId,
    pub generated_anchors: Vec<GeneratedSample>,
    pub support_anchors: Vec<String>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.generated_anchors.len() + self.support_anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces the support anchors with `supports`, verbatim.
pub fn merge_supports(anchor_set: AnchorSet, supports: Vec<String>) -> AnchorSet {
    AnchorSet {
        support_anchors: supports,
        ..anchor_set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorOrigin {
    Generated,
    Support,
}

/// One anchor in collection order; also the anchor-store line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub class_id: ClassId,
    pub text: String,
    pub origin: AnchorOrigin,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorCollection {
    /// Ascending class order; also the canonical order for tie-breaks.
    pub classes: Vec<ClassId>,
    pub anchor_sets: BTreeMap<ClassId, AnchorSet>,
}

impl AnchorCollection {
    pub fn new(sets: impl IntoIterator<Item = AnchorSet>) -> Self {
        let anchor_sets: BTreeMap<ClassId, AnchorSet> = sets.into_iter().map(|s| (s.class_id.clone(), s)).collect();
        AnchorCollection {
            classes: anchor_sets.keys().cloned().collect(),
            anchor_sets,
        }
    }

    /// Every anchor: class by class, generated before supports.
    pub fn anchors(&self) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(self.total_anchors());
        for class in &self.classes {
            let set = &self.anchor_sets[class];
            out.extend(set.generated_anchors.iter().map(|g| Anchor {
                class_id: class.clone(),
                text: g.text.clone(),
                origin: AnchorOrigin::Generated,
                seed: Some(g.seed),
            }));
            out.extend(set.support_anchors.iter().map(|t| Anchor {
                class_id: class.clone(),
                text: t.clone(),
                origin: AnchorOrigin::Support,
                seed: None,
            }));
        }
        out
    }

    pub fn total_anchors(&self) -> usize {
        self.anchor_sets.values().map(AnchorSet::len).sum()
    }

    /// The same collection with support anchors dropped.
    pub fn generated_only(&self) -> Self {
        AnchorCollection::new(self.anchor_sets.values().map(|s| AnchorSet {
            support_anchors: Vec::new(),
            ..s.clone()
        }))
    }
}

/// `(encoder id, SHA-256 of text)`.
type CacheKey = (String, [u8; 32]);

/// Embeddings keyed by encoder and text digest.
pub struct EmbeddingCache<T> {
    entries: RwLock<HashMap<CacheKey, Embedding<T>>>,
}

impl<T: Scalar> Default for EmbeddingCache<T> {
    fn default() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
        }
    }
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(encoder: &str, text: &str) -> (String, [u8; 32]) {
        let digest = Sha256::digest(text.as_bytes());
        let mut h = [0u8; 32];
        h.copy_from_slice(&digest);
        (encoder.to_string(), h)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embeds `texts`, calling the encoder only for uncached ones.
    pub fn embed(&self, encoder: &dyn TextEncoder<T>, texts: &[String]) -> Result<Vec<Embedding<T>>, ScreeningError> {
        let keys: Vec<_> = texts.iter().map(|t| Self::key(encoder.id(), t)).collect();
        let missing: Vec<String> = {
            let entries = self.entries.read().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .zip(&keys)
                .filter(|(_, k)| !entries.contains_key(*k) && seen.insert((*k).clone()))
                .map(|(t, _)| t.clone())
                .collect()
        };
        if !missing.is_empty() {
            let fresh = encoder.embed(&missing)?;
            let n_truncated = fresh.iter().filter(|e| e.truncated).count();
            if n_truncated > 0 {
                log::warn!("encoder {} truncated {n_truncated} inputs", encoder.id());
            }
            let mut entries = self.entries.write().expect("cache lock");
            for (t, e) in missing.iter().zip(fresh) {
                entries.insert(Self::key(encoder.id(), t), e);
            }
        }
        let entries = self.entries.read().expect("cache lock");
        Ok(keys.iter().map(|k| entries[k].clone()).collect())
    }
}

/// Screens one class: embed, prototype, select `p_count` anchors. Logs a
/// warning when fewer than `p_count` samples exist.
#[allow(clippy::too_many_arguments)]
pub fn screen_class<T: Scalar>(
    class_id: &ClassId,
    samples: &[GeneratedSample],
    encoder: &dyn TextEncoder<T>,
    cache: &EmbeddingCache<T>,
    p_count: usize,
    temperature: T,
    mode: SelectionMode,
    seed: u64,
) -> Result<(AnchorSet, Prototype<T>), ScreeningError> {
    let texts: Vec<String> = samples.iter().map(|s| s.text.clone()).collect();
    let embeddings = cache.embed(encoder, &texts)?;
    let prototype = Prototype::new(class_id.clone(), &embeddings)?;
    let chosen = select_anchors(
        samples,
        &embeddings,
        &prototype.vector,
        p_count,
        temperature,
        seed,
        mode,
    )?;
    if chosen.len() < p_count {
        log::warn!(
            "class `{class_id}`: only {} generated anchors available, P = {p_count}",
            chosen.len()
        );
    }
    Ok((
        AnchorSet {
            class_id: class_id.clone(),
            generated_anchors: chosen,
            support_anchors: Vec::new(),
        },
        prototype,
    ))
}

pub fn write_anchor_store(path: &Path, collection: &AnchorCollection) -> Result<(), ScreeningError> {
    let io = |source| ScreeningError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for a in collection.anchors() {
        writeln!(w, "{}", serde_json::to_string(&a).expect("anchor serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_anchor_store(path: &Path) -> Result<AnchorCollection, ScreeningError> {
    let io = |source| ScreeningError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut sets: BTreeMap<ClassId, AnchorSet> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Anchor = serde_json::from_str(&line).map_err(|e| ScreeningError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let set = sets.entry(a.class_id.clone()).or_insert_with(|| AnchorSet {
            class_id: a.class_id.clone(),
            generated_anchors: Vec::new(),
            support_anchors: Vec::new(),
        });
        match a.origin {
            AnchorOrigin::Generated => set.generated_anchors.push(GeneratedSample {
                class_id: a.class_id,
                text: a.text,
                raw: String::new(),
                seed: a.seed.unwrap_or(0),
                truncated_at_marker: true,
            }),
            AnchorOrigin::Support => set.support_anchors.push(a.text),
        }
    }
    Ok(AnchorCollection::new(sets.into_values()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub dtype: String,
    pub byte_order: String,
    pub rows: Vec<EmbeddingRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub class_id: ClassId,
    pub text: String,
}

/// Writes embeddings as a row-major little-endian `f64` array plus a JSON
/// index naming each row.
pub fn write_embeddings<T: Scalar>(
    bin_path: &Path,
    index_path: &Path,
    rows: &[(ClassId, String, Embedding<T>)],
) -> Result<(), ScreeningError> {
    let dim = rows.first().map(|r| r.2.dim()).unwrap_or(0);
    let mut bytes = Vec::with_capacity(rows.len() * dim * 8);
    for (_, _, e) in rows {
        for &x in &e.vector {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    fs::write(bin_path, bytes).map_err(|source| ScreeningError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    let index = EmbeddingIndex {
        dim,
        dtype: "f64".into(),
        byte_order: "little".into(),
        rows: rows
            .iter()
            .map(|(c, t, _)| EmbeddingRow {
                class_id: c.clone(),
                text: t.clone(),
            })
            .collect(),
    };
    fs::write(index_path, serde_json::to_vec_pretty(&index).expect("index serializes")).map_err(|source| {
        ScreeningError::Io {
            path: index_path.display().to_string(),
            source,
        }
    })
}

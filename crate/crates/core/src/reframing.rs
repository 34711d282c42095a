//! Turns an N-way anchor collection into a binary same-class /
//! different-class pair dataset, and defines the pair loss.
//!
//! Every ordered pair of anchors `(a, b)`, self-pairs included, becomes one
//! training example whose target is the smoothed indicator
//! `[(1-eps)m + eps/2, (1-eps)(1-m) + eps/2]` with `m = 1` iff both anchors
//! share a class. With `A` anchors in total this yields `A^2` pairs.
//!
//! The default loss is `KL(v || phi) = sum_l v_l ln(v_l / phi_l)` with the
//! model output first; [`LossMode::CrossEntropy`] switches to the
//! conventional `KL(phi || v)`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::SimilarityVector;
use crate::corpus::ClassId;
use crate::scalar::Scalar;
use crate::screening::AnchorCollection;
use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum ReframingError {
    #[error("smoothing epsilon {0} must lie in [0, 1)")]
    BadEpsilon(f64),
    #[error("negative_ratio {0} must be positive")]
    BadNegativeRatio(f64),
    #[error("anchor collection is empty")]
    EmptyCollection,
    #[error("loss undefined: component {which} = {value} must be positive (epsilon = 0 with a hard target?)")]
    NonPositiveComponent { which: &'static str, value: f64 },
    #[error("validation size {n_val} must be smaller than the {total} available pairs")]
    ValidationTooLarge { n_val: usize, total: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed pair file {path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `KL(v || phi)`, model distribution first.
    #[default]
    ForwardKl,
    /// `KL(phi || v)`, equivalent to cross-entropy up to a constant.
    CrossEntropy,
}

/// Smoothed two-way target. `phi0` is the same-class mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetIndicator<T> {
    pub phi0: T,
    pub phi1: T,
    pub matched: bool,
}

pub fn target_indicator<T: Scalar>(
    class_a: &ClassId,
    class_b: &ClassId,
    epsilon: T,
) -> Result<TargetIndicator<T>, ReframingError> {
    if !(epsilon >= T::zero() && epsilon < T::one()) {
        return Err(ReframingError::BadEpsilon(epsilon.as_f64()));
    }
    let matched = class_a == class_b;
    let m = if matched { T::one() } else { T::zero() };
    let half = epsilon / T::lit(2.0);
    let keep = T::one() - epsilon;
    Ok(TargetIndicator {
        phi0: keep * m + half,
        phi1: keep * (T::one() - m) + half,
        matched,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair<T> {
    pub text_a: String,
    pub text_b: String,
    pub class_a: ClassId,
    pub class_b: ClassId,
    pub target: TargetIndicator<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset<T> {
    pub pairs: Vec<AnchorPair<T>>,
    pub n_classes: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl<T: Scalar> PairDataset<T> {
    pub fn from_pairs(pairs: Vec<AnchorPair<T>>, n_classes: usize) -> Self {
        let n_positive = pairs.iter().filter(|p| p.target.matched).count();
        let n_negative = pairs.len() - n_positive;
        PairDataset {
            pairs,
            n_classes,
            n_positive,
            n_negative,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Enumerates ordered anchor pairs in collection order.
///
/// With `negative_ratio = Some(r)`, only `ceil(r * n_positive)` negatives
/// (capped at the number available) are kept, drawn with `seed`; enumeration
/// order is preserved.
pub fn build_pair_dataset<T: Scalar>(
    collection: &AnchorCollection,
    epsilon: T,
    include_self_pairs: bool,
    negative_ratio: Option<f64>,
    seed: u64,
) -> Result<PairDataset<T>, ReframingError> {
    if let Some(r) = negative_ratio {
        if r.is_nan() || r <= 0.0 {
            return Err(ReframingError::BadNegativeRatio(r));
        }
    }
    let anchors = collection.anchors();
    if anchors.is_empty() {
        return Err(ReframingError::EmptyCollection);
    }
    let positive = target_indicator(&ClassId::from("a"), &ClassId::from("a"), epsilon)?;
    let negative = target_indicator(&ClassId::from("a"), &ClassId::from("b"), epsilon)?;

    let mut pairs = Vec::with_capacity(anchors.len() * anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in anchors.iter().enumerate() {
            if i == j && !include_self_pairs {
                continue;
            }
            pairs.push(AnchorPair {
                text_a: a.text.clone(),
                text_b: b.text.clone(),
                class_a: a.class_id.clone(),
                class_b: b.class_id.clone(),
                target: if a.class_id == b.class_id { positive } else { negative },
            });
        }
    }

    if let Some(ratio) = negative_ratio {
        let neg_idx: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].target.matched).collect();
        let n_pos = pairs.len() - neg_idx.len();
        let keep = ((ratio * n_pos as f64).ceil() as usize).min(neg_idx.len());
        let mut rng = rng_from_seed(seed);
        let mut keep_mask = vec![false; pairs.len()];
        for k in index::sample(&mut rng, neg_idx.len(), keep) {
            keep_mask[neg_idx[k]] = true;
        }
        let mut i = 0;
        pairs.retain(|p| {
            let keep = p.target.matched || keep_mask[i];
            i += 1;
            keep
        });
    }
    Ok(PairDataset::from_pairs(pairs, collection.classes.len()))
}

/// Sum of `p_l ln(p_l / q_l)` written as `sum p_l (r_l - ln(1 + r_l))`
/// with `r_l = q_l / p_l - 1`; each term is non-negative, and a zero `p_l`
/// contributes `q_l`.
fn kl_divergence<T: Scalar>(p: [T; 2], q: [T; 2]) -> T {
    let mut total = T::zero();
    for l in 0..2 {
        let term = if p[l] == T::zero() {
            q[l]
        } else {
            let r = q[l] / p[l] - T::one();
            p[l] * (r - r.ln_1p())
        };
        total = total + term;
    }
    clamp_non_negative(total)
}

/// Rounding can push a divergence slightly below zero; NaN passes through
/// so callers still see it.
fn clamp_non_negative<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        T::zero()
    } else {
        x
    }
}

/// Per-pair loss between a scorer output and its target.
pub fn pair_loss<T: Scalar>(
    v: &SimilarityVector<T>,
    phi: &TargetIndicator<T>,
    mode: LossMode,
) -> Result<T, ReframingError> {
    let check = |which: &'static str, x: T, strict: bool| {
        let ok = if strict { x > T::zero() } else { x >= T::zero() };
        if ok && x.is_finite() {
            Ok(())
        } else {
            Err(ReframingError::NonPositiveComponent {
                which,
                value: x.as_f64(),
            })
        }
    };
    match mode {
        LossMode::ForwardKl => {
            check("v0", v.v0, true)?;
            check("v1", v.v1, true)?;
            check("phi0", phi.phi0, true)?;
            check("phi1", phi.phi1, true)?;
            Ok(kl_divergence([v.v0, v.v1], [phi.phi0, phi.phi1]))
        }
        LossMode::CrossEntropy => {
            check("v0", v.v0, true)?;
            check("v1", v.v1, true)?;
            check("phi0", phi.phi0, false)?;
            check("phi1", phi.phi1, false)?;
            Ok(kl_divergence([phi.phi0, phi.phi1], [v.v0, v.v1]))
        }
    }
}

/// Arithmetic mean of [`pair_loss`] over a batch.
pub fn batch_loss<T: Scalar>(
    outputs: &[SimilarityVector<T>],
    targets: &[TargetIndicator<T>],
    mode: LossMode,
) -> Result<T, ReframingError> {
    assert_eq!(outputs.len(), targets.len(), "outputs and targets differ in length");
    if outputs.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for (v, phi) in outputs.iter().zip(targets) {
        sum = sum + pair_loss(v, phi, mode)?;
    }
    Ok(sum / T::from_usize_lossy(outputs.len()))
}

/// Loss and its gradient with respect to the two pre-softmax logits,
/// evaluated through log-softmax so saturated outputs stay finite.
///
/// Forward KL: `dL/dz_k = v_k (ln v_k - ln phi_k - L)`.
/// Cross-entropy: `dL/dz_k = v_k - phi_k`.
pub fn loss_and_logit_grad<T: Scalar>(logits: [T; 2], phi: &TargetIndicator<T>, mode: LossMode) -> (T, [T; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let log_v = [logits[0] - lse, logits[1] - lse];
    let v = [log_v[0].exp(), log_v[1].exp()];
    let log_phi = [phi.phi0.ln(), phi.phi1.ln()];
    let target = [phi.phi0, phi.phi1];
    match mode {
        LossMode::ForwardKl => {
            let loss = v[0] * (log_v[0] - log_phi[0]) + v[1] * (log_v[1] - log_phi[1]);
            let g = [
                v[0] * (log_v[0] - log_phi[0] - loss),
                v[1] * (log_v[1] - log_phi[1] - loss),
            ];
            (clamp_non_negative(loss), g)
        }
        LossMode::CrossEntropy => {
            let term = |l: usize| {
                if target[l] == T::zero() {
                    T::zero()
                } else {
                    target[l] * (log_phi[l] - log_v[l])
                }
            };
            let loss = term(0) + term(1);
            (clamp_non_negative(loss), [v[0] - target[0], v[1] - target[1]])
        }
    }
}

/// Moves `n_val` pairs, drawn without replacement with `seed`, into a
/// validation set. Both halves keep the original relative order.
pub fn split_validation<T: Scalar>(
    pairs: &PairDataset<T>,
    n_val: usize,
    seed: u64,
) -> Result<(PairDataset<T>, PairDataset<T>), ReframingError> {
    if n_val >= pairs.len() {
        return Err(ReframingError::ValidationTooLarge {
            n_val,
            total: pairs.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut is_val = vec![false; pairs.len()];
    for i in index::sample(&mut rng, pairs.len(), n_val) {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (p, v) in pairs.pairs.iter().zip(is_val) {
        if v {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((
        PairDataset::from_pairs(train, pairs.n_classes),
        PairDataset::from_pairs(val, pairs.n_classes),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRecord {
    text_a: String,
    text_b: String,
    class_a: ClassId,
    class_b: ClassId,
    phi0: f64,
}

pub fn write_pairs_jsonl<T: Scalar>(path: &Path, pairs: &PairDataset<T>) -> Result<(), ReframingError> {
    let io = |source| ReframingError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for p in &pairs.pairs {
        let rec = PairRecord {
            text_a: p.text_a.clone(),
            text_b: p.text_b.clone(),
            class_a: p.class_a.clone(),
            class_b: p.class_b.clone(),
            phi0: p.target.phi0.as_f64(),
        };
        let line = serde_json::to_string(&rec).expect("pair record serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pairs_jsonl<T: Scalar>(path: &Path, n_classes: usize) -> Result<PairDataset<T>, ReframingError> {
    let io = |source| ReframingError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| ReframingError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let phi0 = T::lit(rec.phi0);
        pairs.push(AnchorPair {
            target: TargetIndicator {
                phi0,
                phi1: T::one() - phi0,
                matched: rec.class_a == rec.class_b,
            },
            text_a: rec.text_a,
            text_b: rec.text_b,
            class_a: rec.class_a,
            class_b: rec.class_b,
        });
    }
    Ok(PairDataset::from_pairs(pairs, n_classes))
}

//! Temperature, top-k and top-p (nucleus) filtering of a next-token
//! distribution.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::scalar::Scalar;

/// Softmax of `logits / temperature`.
pub fn softmax_with_temperature<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let scaled: Vec<T> = logits.iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Keeps the `top_k` most probable tokens, then the smallest prefix of those
/// whose cumulative mass reaches `top_p`, and renormalizes. At least one
/// token always survives. Ties keep the lower index first.
pub fn filter_top_k_top_p<T: Scalar>(probs: &[T], top_k: usize, top_p: T) -> Vec<T> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(top_k.max(1));

    let mut kept = Vec::with_capacity(order.len());
    let mut mass = T::zero();
    for &i in &order {
        kept.push(i);
        mass = mass + probs[i];
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![T::zero(); probs.len()];
    for &i in &kept {
        out[i] = probs[i] / mass;
    }
    out
}

/// Draws an index from a (not necessarily normalized) weight vector.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> Option<usize> {
    let w: Vec<f64> = weights.iter().map(|x| x.as_f64()).collect();
    WeightedIndex::new(&w).ok().map(|d| d.sample(rng))
}

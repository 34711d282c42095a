//! Accuracy and support-weighted F1 from a confusion table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::ClassId;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("confusion matrix is empty")]
    Empty,
}

/// Sparse `(gold, predicted) -> count` table over a declared label set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Confusion {
    labels: BTreeSet<ClassId>,
    counts: BTreeMap<(ClassId, ClassId), usize>,
}

#[derive(Serialize, Deserialize)]
struct ConfusionEntry {
    gold: ClassId,
    pred: ClassId,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ConfusionWire {
    labels: Vec<ClassId>,
    entries: Vec<ConfusionEntry>,
}

impl Serialize for Confusion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ConfusionWire {
            labels: self.labels.iter().cloned().collect(),
            entries: self
                .counts
                .iter()
                .map(|((g, p), &count)| ConfusionEntry {
                    gold: g.clone(),
                    pred: p.clone(),
                    count,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Confusion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = ConfusionWire::deserialize(d)?;
        let mut c = Confusion::with_labels(wire.labels);
        for e in wire.entries {
            c.add_count(e.gold, e.pred, e.count);
        }
        Ok(c)
    }
}

impl Confusion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares labels up front so classes that are never predicted or
    /// never occur still appear.
    pub fn with_labels(labels: impl IntoIterator<Item = ClassId>) -> Self {
        Confusion {
            labels: labels.into_iter().collect(),
            counts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, gold: ClassId, pred: ClassId) {
        self.add_count(gold, pred, 1);
    }

    pub fn add_count(&mut self, gold: ClassId, pred: ClassId, count: usize) {
        if count == 0 {
            return;
        }
        self.labels.insert(gold.clone());
        self.labels.insert(pred.clone());
        *self.counts.entry((gold, pred)).or_default() += count;
    }

    pub fn labels(&self) -> &BTreeSet<ClassId> {
        &self.labels
    }

    pub fn count(&self, gold: &ClassId, pred: &ClassId) -> usize {
        self.counts.get(&(gold.clone(), pred.clone())).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts.iter().filter(|((g, p), _)| g == p).map(|(_, &n)| n).sum()
    }

    /// Gold occurrences of `class`.
    pub fn support(&self, class: &ClassId) -> usize {
        self.counts
            .iter()
            .filter(|((g, _), _)| g == class)
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn predicted(&self, class: &ClassId) -> usize {
        self.counts
            .iter()
            .filter(|((_, p), _)| p == class)
            .map(|(_, &n)| n)
            .sum()
    }

    /// F1 of one class; zero when precision and recall are both zero.
    pub fn f1<T: Scalar>(&self, class: &ClassId) -> T {
        let tp = self.count(class, class);
        let predicted = self.predicted(class);
        let support = self.support(class);
        if tp == 0 || predicted == 0 || support == 0 {
            return T::zero();
        }
        let precision = T::from_usize_lossy(tp) / T::from_usize_lossy(predicted);
        let recall = T::from_usize_lossy(tp) / T::from_usize_lossy(support);
        T::lit(2.0) * precision * recall / (precision + recall)
    }
}

pub fn accuracy<T: Scalar>(confusion: &Confusion) -> Result<T, MetricError> {
    let total = confusion.total();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    Ok(T::from_usize_lossy(confusion.correct()) / T::from_usize_lossy(total))
}

/// `sum_c (support_c / total) * F1_c`.
pub fn weighted_f1<T: Scalar>(confusion: &Confusion) -> Result<T, MetricError> {
    let total = confusion.total();
    if total == 0 {
        return Err(MetricError::Empty);
    }
    let total = T::from_usize_lossy(total);
    Ok(confusion
        .labels()
        .iter()
        .map(|c| T::from_usize_lossy(confusion.support(c)) / total * confusion.f1::<T>(c))
        .sum())
}

/// Unweighted mean of per-class F1 over classes with non-zero support.
pub fn macro_f1<T: Scalar>(confusion: &Confusion) -> Result<T, MetricError> {
    if confusion.total() == 0 {
        return Err(MetricError::Empty);
    }
    let classes: Vec<&ClassId> = confusion.labels().iter().filter(|c| confusion.support(c) > 0).collect();
    let sum: T = classes.iter().map(|c| confusion.f1::<T>(c)).sum();
    Ok(sum / T::from_usize_lossy(classes.len()))
}

/// Arithmetic mean computed over the values in sorted order, so the result
/// does not depend on input order.
pub fn order_invariant_mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::nan();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    sorted.iter().copied().sum::<T>() / T::from_usize_lossy(values.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> ClassId {
        ClassId::from(s)
    }

    #[test]
    fn accuracy_examples() {
        let mut m = Confusion::new();
        m.add_count(c("A"), c("A"), 3);
        m.add_count(c("A"), c("B"), 1);
        assert_eq!(accuracy::<f64>(&m).unwrap(), 0.75);
        let mut perfect = Confusion::new();
        perfect.add_count(c("A"), c("A"), 2);
        perfect.add_count(c("B"), c("B"), 5);
        assert_eq!(accuracy::<f64>(&perfect).unwrap(), 1.0);
        assert_eq!(weighted_f1::<f64>(&perfect).unwrap(), 1.0);
        assert_eq!(accuracy::<f64>(&Confusion::new()), Err(MetricError::Empty));
        assert_eq!(weighted_f1::<f32>(&Confusion::new()), Err(MetricError::Empty));
    }

    #[test]
    fn weighted_f1_hand_value() {
        let mut m = Confusion::with_labels([c("A"), c("B")]);
        m.add_count(c("A"), c("A"), 2);
        m.add_count(c("B"), c("A"), 2);
        assert!((m.f1::<f64>(&c("A")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.f1::<f64>(&c("B")), 0.0);
        assert!((weighted_f1::<f64>(&m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn serde_round_trip() {
        let mut m = Confusion::with_labels([c("A"), c("B"), c("Z")]);
        m.add_count(c("A"), c("B"), 4);
        m.add(c("B"), c("B"));
        let json = serde_json::to_string(&m).unwrap();
        let back: Confusion = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(back.labels().contains(&c("Z")));
    }

    #[test]
    fn mean_ignores_order() {
        let a = [0.1, 0.7, 0.3, 1e-9, 0.9];
        let mut b = a;
        b.reverse();
        assert_eq!(order_invariant_mean(&a), order_invariant_mean(&b));
    }
}

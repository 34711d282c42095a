//! Query classification from query–anchor similarity scores.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{score_pair, BackendError, PairScorer};
use crate::corpus::ClassId;
use crate::scalar::Scalar;
use crate::screening::AnchorCollection;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("no score rows to predict from")]
    EmptyScores,
    #[error("class `{0}` has no anchors to average over")]
    ClassWithoutRows(ClassId),
    #[error("anchor collection is empty")]
    EmptyCollection,
    #[error("scorer failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Class of the single best-scoring anchor.
    TopOne,
    /// Class with the best mean anchor score.
    Average,
}

impl Rule {
    pub fn short_name(self) -> &'static str {
        match self {
            Rule::TopOne => "top",
            Rule::Average => "avg",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top" | "top_one" => Ok(Rule::TopOne),
            "avg" | "average" => Ok(Rule::Average),
            other => Err(format!("unknown rule `{other}` (expected top or avg)")),
        }
    }
}

/// Which anchors take part in test-time scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestAnchors {
    #[default]
    Full,
    GeneratedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow<T> {
    pub class_id: ClassId,
    pub anchor_text: String,
    pub v0: T,
    pub v1: T,
    pub v_hat: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores<T> {
    pub query: String,
    /// Classes of the collection the rows were scored against.
    pub classes: Vec<ClassId>,
    pub rows: Vec<ScoreRow<T>>,
}

impl<T: Scalar> QueryScores<T> {
    /// Builds a table directly from `(class, v_hat)` rows; `v0`/`v1` are
    /// reconstructed from `v_hat`.
    pub fn from_scores(query: &str, rows: impl IntoIterator<Item = (ClassId, T)>) -> Self {
        let two = T::lit(2.0);
        let rows: Vec<ScoreRow<T>> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (class_id, v_hat))| ScoreRow {
                class_id,
                anchor_text: format!("anchor-{i}"),
                v0: (T::one() + v_hat) / two,
                v1: (T::one() - v_hat) / two,
                v_hat,
            })
            .collect();
        let mut classes: Vec<ClassId> = rows.iter().map(|r| r.class_id.clone()).collect();
        classes.sort();
        classes.dedup();
        QueryScores {
            query: query.to_string(),
            classes,
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub query: String,
    pub label: ClassId,
    pub rule: Rule,
    /// Winning class score minus the best other class score; `None` with a
    /// single scored class.
    pub margin: Option<T>,
    pub per_class_score: BTreeMap<ClassId, T>,
}

/// Scores `(query, anchor)` for every anchor of the collection, in
/// collection order.
pub fn score_query<T: Scalar>(
    query: &str,
    collection: &AnchorCollection,
    scorer: &dyn PairScorer<T>,
) -> Result<QueryScores<T>, PredictionError> {
    if !scorer.is_trained() {
        return Err(BackendError::NotTrained.into());
    }
    let anchors = collection.anchors();
    if anchors.is_empty() {
        return Err(PredictionError::EmptyCollection);
    }
    let mut rows = Vec::with_capacity(anchors.len());
    for a in anchors {
        let v = score_pair(scorer, query, &a.text)?;
        rows.push(ScoreRow {
            class_id: a.class_id,
            anchor_text: a.text,
            v0: v.v0,
            v1: v.v1,
            v_hat: v.score(),
        });
    }
    Ok(QueryScores {
        query: query.to_string(),
        classes: collection.classes.clone(),
        rows,
    })
}

/// Argmax over classes in ascending class order; the first maximum wins.
fn decide<T: Scalar>(scores: &QueryScores<T>, rule: Rule, per_class: BTreeMap<ClassId, T>) -> Prediction<T> {
    let mut best: Option<(&ClassId, T)> = None;
    for (c, &s) in &per_class {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    let (label, top) = best.expect("per-class scores are non-empty");
    let runner_up = per_class
        .iter()
        .filter(|(c, _)| *c != label)
        .map(|(_, &s)| s)
        .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))));
    Prediction {
        query: scores.query.clone(),
        label: label.clone(),
        rule,
        margin: runner_up.map(|r| top - r),
        per_class_score: per_class.clone(),
    }
}

pub fn predict_top_one<T: Scalar>(scores: &QueryScores<T>) -> Result<Prediction<T>, PredictionError> {
    if scores.rows.is_empty() {
        return Err(PredictionError::EmptyScores);
    }
    let mut per_class: BTreeMap<ClassId, T> = BTreeMap::new();
    for r in &scores.rows {
        per_class
            .entry(r.class_id.clone())
            .and_modify(|s| *s = s.max(r.v_hat))
            .or_insert(r.v_hat);
    }
    Ok(decide(scores, Rule::TopOne, per_class))
}

pub fn predict_average<T: Scalar>(scores: &QueryScores<T>) -> Result<Prediction<T>, PredictionError> {
    if scores.rows.is_empty() {
        return Err(PredictionError::EmptyScores);
    }
    let mut sums: BTreeMap<ClassId, (T, usize)> = BTreeMap::new();
    for r in &scores.rows {
        let e = sums.entry(r.class_id.clone()).or_insert((T::zero(), 0));
        e.0 = e.0 + r.v_hat;
        e.1 += 1;
    }
    if let Some(c) = scores.classes.iter().find(|c| !sums.contains_key(*c)) {
        return Err(PredictionError::ClassWithoutRows(c.clone()));
    }
    let per_class = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / T::from_usize_lossy(n)))
        .collect();
    Ok(decide(scores, Rule::Average, per_class))
}

pub fn predict<T: Scalar>(scores: &QueryScores<T>, rule: Rule) -> Result<Prediction<T>, PredictionError> {
    match rule {
        Rule::TopOne => predict_top_one(scores),
        Rule::Average => predict_average(scores),
    }
}

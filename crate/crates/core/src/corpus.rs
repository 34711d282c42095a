//! Labeled text datasets, class splits and N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

/// Class identifier as it appears in the dataset's `label` field.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        ClassId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: malformed row: {reason}")]
    MalformedRow { path: PathBuf, line: usize, reason: String },
    #[error("{0}: no records")]
    NoRecords(PathBuf),
    #[error("descriptions file {path} is malformed: {reason}")]
    MalformedDescriptions { path: PathBuf, reason: String },
    #[error("configuration error: label `{0}` has no description")]
    MissingDescription(ClassId),
    #[error("class `{0}` appears in more than one split set")]
    OverlappingSplit(ClassId),
    #[error("unknown class `{0}`")]
    UnknownClass(ClassId),
    #[error("need {needed} classes for a {needed}-way episode, only {available} available")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class `{class}` has {available} records, episode needs {needed}")]
    InsufficientRecords {
        class: ClassId,
        available: usize,
        needed: usize,
    },
    #[error("n_way must be at least 1")]
    ZeroWay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<Record>,
    pub class_descriptions: BTreeMap<ClassId, String>,
}

impl Dataset {
    /// Builds a dataset in memory, enforcing the same invariants as
    /// [`load_dataset`].
    pub fn new(
        name: impl Into<String>,
        records: Vec<Record>,
        class_descriptions: BTreeMap<ClassId, String>,
    ) -> Result<Self, CorpusError> {
        let records: Vec<Record> = records
            .into_iter()
            .map(|r| Record {
                text: r.text.trim().to_string(),
                label: r.label,
            })
            .collect();
        for (i, r) in records.iter().enumerate() {
            if r.text.is_empty() {
                return Err(CorpusError::MalformedRow {
                    path: PathBuf::from("<memory>"),
                    line: i + 1,
                    reason: "empty text".into(),
                });
            }
            if !class_descriptions.contains_key(&r.label) {
                return Err(CorpusError::MissingDescription(r.label.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            records,
            class_descriptions,
        })
    }

    /// Classes that occur in at least one record, in ascending order.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.records.iter().map(|r| r.label.clone()).collect()
    }

    pub fn description(&self, class: &ClassId) -> Option<&str> {
        self.class_descriptions.get(class).map(String::as_str)
    }

    /// Record indices per class, each list in record order.
    pub fn indices_by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.label.clone()).or_default().push(i);
        }
        out
    }
}

/// Reads a `{class-id: description}` JSON map.
pub fn load_descriptions(path: &Path) -> Result<BTreeMap<ClassId, String>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|e| CorpusError::MalformedDescriptions {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a dataset file plus its sidecar descriptions file. The dataset name
/// is the file stem.
pub fn load_dataset(path: &Path, format: DatasetFormat, descriptions: &Path) -> Result<Dataset, CorpusError> {
    let class_descriptions = load_descriptions(descriptions)?;
    let records = match format {
        DatasetFormat::Jsonl => read_jsonl(path)?,
        DatasetFormat::Csv => read_csv(path)?,
    };
    if records.is_empty() {
        return Err(CorpusError::NoRecords(path.to_path_buf()));
    }
    for r in &records {
        if !class_descriptions.contains_key(&r.label) {
            return Err(CorpusError::MissingDescription(r.label.clone()));
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        records,
        class_descriptions,
    })
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn checked_record(path: &Path, line: usize, text: String, label: String) -> Result<Record, CorpusError> {
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(malformed(path, line, "empty text"));
    }
    if label.trim().is_empty() {
        return Err(malformed(path, line, "empty label"));
    }
    Ok(Record {
        text,
        label: ClassId(label),
    })
}

fn read_jsonl(path: &Path) -> Result<Vec<Record>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Record = serde_json::from_str(&line).map_err(|e| malformed(path, line_no, e.to_string()))?;
        records.push(checked_record(path, line_no, raw.text, raw.label.0)?);
    }
    Ok(records)
}

fn read_csv(path: &Path) -> Result<Vec<Record>, CorpusError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(path, 1, e.to_string()))?;
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<Record>().enumerate() {
        // header occupies line 1
        let line_no = i + 2;
        let raw = row.map_err(|e| malformed(path, line_no, e.to_string()))?;
        records.push(checked_record(path, line_no, raw.text, raw.label.0)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub train_classes: BTreeSet<ClassId>,
    pub valid_classes: BTreeSet<ClassId>,
    pub test_classes: BTreeSet<ClassId>,
}

/// Validates a train/valid/test class assignment against the dataset.
pub fn split_classes(
    dataset: &Dataset,
    train: &[ClassId],
    valid: &[ClassId],
    test: &[ClassId],
) -> Result<ClassSplit, CorpusError> {
    let known = dataset.classes();
    let mut seen = BTreeSet::new();
    let mut sets: [BTreeSet<ClassId>; 3] = Default::default();
    for (slot, group) in sets.iter_mut().zip([train, valid, test]) {
        for c in group {
            if !known.contains(c) {
                return Err(CorpusError::UnknownClass(c.clone()));
            }
            if !seen.insert(c.clone()) {
                return Err(CorpusError::OverlappingSplit(c.clone()));
            }
            slot.insert(c.clone());
        }
    }
    let [train_classes, valid_classes, test_classes] = sets;
    Ok(ClassSplit {
        train_classes,
        valid_classes,
        test_classes,
    })
}

/// One text drawn into an episode, with its dataset record index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub record: usize,
    pub text: String,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    /// The N episode classes in ascending order.
    pub classes: Vec<ClassId>,
    pub supports: BTreeMap<ClassId, Vec<EpisodeItem>>,
    pub queries: Vec<EpisodeItem>,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

/// Record-index view of an episode for audit files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub classes: Vec<ClassId>,
    pub support_records: BTreeMap<ClassId, Vec<usize>>,
    pub query_records: Vec<usize>,
    pub seed: u64,
}

impl EpisodeTask {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_texts(&self, class: &ClassId) -> Vec<String> {
        self.supports
            .get(class)
            .map(|items| items.iter().map(|i| i.text.clone()).collect())
            .unwrap_or_default()
    }

    pub fn dump(&self) -> EpisodeDump {
        EpisodeDump {
            classes: self.classes.clone(),
            support_records: self
                .supports
                .iter()
                .map(|(c, items)| (c.clone(), items.iter().map(|i| i.record).collect()))
                .collect(),
            query_records: self.queries.iter().map(|i| i.record).collect(),
            seed: self.seed,
        }
    }
}

/// Samples an N-way K-shot episode with `n_query` queries per class.
///
/// Classes are drawn without replacement from `classes`; within each class
/// `k_shot + n_query` distinct records are drawn, the first `k_shot` becoming
/// supports. Queries are shuffled across classes. The result is a pure
/// function of the arguments.
pub fn sample_episode(
    dataset: &Dataset,
    classes: &BTreeSet<ClassId>,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<EpisodeTask, CorpusError> {
    if n_way == 0 {
        return Err(CorpusError::ZeroWay);
    }
    let known = dataset.classes();
    if let Some(c) = classes.iter().find(|c| !known.contains(*c)) {
        return Err(CorpusError::UnknownClass(c.clone()));
    }
    if classes.len() < n_way {
        return Err(CorpusError::NotEnoughClasses {
            needed: n_way,
            available: classes.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let pool: Vec<&ClassId> = classes.iter().collect();
    let mut chosen: Vec<ClassId> = index::sample(&mut rng, pool.len(), n_way)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    chosen.sort();

    let by_class = dataset.indices_by_class();
    let needed = k_shot + n_query;
    let mut supports = BTreeMap::new();
    let mut queries = Vec::with_capacity(n_way * n_query);
    for class in &chosen {
        let members = &by_class[class];
        if members.len() < needed {
            return Err(CorpusError::InsufficientRecords {
                class: class.clone(),
                available: members.len(),
                needed,
            });
        }
        let drawn: Vec<usize> = index::sample(&mut rng, members.len(), needed)
            .into_iter()
            .map(|i| members[i])
            .collect();
        let item = |record: usize| EpisodeItem {
            record,
            text: dataset.records[record].text.clone(),
            label: class.clone(),
        };
        supports.insert(class.clone(), drawn[..k_shot].iter().copied().map(item).collect());
        queries.extend(drawn[k_shot..].iter().copied().map(item));
    }
    queries.shuffle(&mut rng);
    Ok(EpisodeTask {
        classes: chosen,
        supports,
        queries,
        k_shot,
        n_query,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synthetic(n_classes: usize, per_class: usize) -> Dataset {
        let mut records = Vec::new();
        let mut desc = BTreeMap::new();
        for c in 0..n_classes {
            let id = ClassId(format!("c{c:02}"));
            desc.insert(id.clone(), format!("class {c}"));
            for i in 0..per_class {
                records.push(Record {
                    text: format!("text {i} of {c}"),
                    label: id.clone(),
                });
            }
        }
        Dataset::new("synthetic", records, desc).unwrap()
    }

    fn ids(range: std::ops::Range<usize>) -> Vec<ClassId> {
        range.map(|c| ClassId(format!("c{c:02}"))).collect()
    }

    #[test]
    fn loads_three_line_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("tiny.jsonl");
        let desc = dir.path().join("desc.json");
        let mut f = fs::File::create(&data).unwrap();
        writeln!(f, r#"{{"text": "play jazz", "label": "music"}}"#).unwrap();
        writeln!(f, r#"{{"text": "  rain tomorrow? ", "label": "weather"}}"#).unwrap();
        writeln!(f, r#"{{"text": "play rock", "label": "music"}}"#).unwrap();
        fs::write(&desc, r#"{"music": "play music", "weather": "get weather"}"#).unwrap();
        let ds = load_dataset(&data, DatasetFormat::Jsonl, &desc).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(ds.classes().len(), 2);
        assert_eq!(ds.records[1].text, "rain tomorrow?");
        assert_eq!(ds.records[2].text, "play rock");
        assert_eq!(ds.name, "tiny");
    }

    #[test]
    fn loads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("tiny.csv");
        let desc = dir.path().join("desc.json");
        fs::write(&data, "text,label\n\"hello, world\",a\nbye,b\n").unwrap();
        fs::write(&desc, r#"{"a": "A", "b": "B"}"#).unwrap();
        let ds = load_dataset(&data, DatasetFormat::Csv, &desc).unwrap();
        assert_eq!(ds.records[0].text, "hello, world");
        assert_eq!(ds.records.len(), 2);
    }

    #[test]
    fn empty_file_has_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("empty.jsonl");
        let desc = dir.path().join("desc.json");
        fs::write(&data, "").unwrap();
        fs::write(&desc, "{}").unwrap();
        let err = load_dataset(&data, DatasetFormat::Jsonl, &desc).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn missing_description_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        let desc = dir.path().join("desc.json");
        fs::write(
            &data,
            "{\"text\":\"x\",\"label\":\"a\"}\n{\"text\":\"y\",\"label\":\"b\"}\n",
        )
        .unwrap();
        fs::write(&desc, r#"{"a": "A"}"#).unwrap();
        let err = load_dataset(&data, DatasetFormat::Jsonl, &desc).unwrap_err();
        assert!(matches!(err, CorpusError::MissingDescription(ref c) if c.as_str() == "b"));
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        let desc = dir.path().join("desc.json");
        fs::write(&data, "{\"text\":\"x\",\"label\":\"a\"}\n{\"text\": 3}\n").unwrap();
        fs::write(&desc, r#"{"a": "A"}"#).unwrap();
        match load_dataset(&data, DatasetFormat::Jsonl, &desc).unwrap_err() {
            CorpusError::MalformedRow { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        fs::write(&data, "{\"text\":\"   \",\"label\":\"a\"}\n").unwrap();
        assert!(matches!(
            load_dataset(&data, DatasetFormat::Jsonl, &desc).unwrap_err(),
            CorpusError::MalformedRow { line: 1, .. }
        ));
    }

    #[test]
    fn split_twenty_news_shape() {
        let ds = synthetic(20, 3);
        let split = split_classes(&ds, &ids(0..8), &ids(8..13), &ids(13..20)).unwrap();
        assert_eq!(
            (
                split.train_classes.len(),
                split.valid_classes.len(),
                split.test_classes.len()
            ),
            (8, 5, 7)
        );
        let union: BTreeSet<_> = split
            .train_classes
            .iter()
            .chain(&split.valid_classes)
            .chain(&split.test_classes)
            .cloned()
            .collect();
        assert_eq!(union, ds.classes());
    }

    #[test]
    fn split_with_empty_valid_set() {
        let ds = synthetic(7, 3);
        let split = split_classes(&ds, &ids(0..5), &[], &ids(5..7)).unwrap();
        assert!(split.valid_classes.is_empty());
        assert_eq!(split.test_classes.len(), 2);
    }

    #[test]
    fn split_rejects_overlap_and_unknown() {
        let ds = synthetic(4, 3);
        assert!(matches!(
            split_classes(&ds, &ids(0..2), &ids(1..3), &[]),
            Err(CorpusError::OverlappingSplit(_))
        ));
        assert!(matches!(
            split_classes(&ds, &ids(0..2), &[], &[ClassId::from("nope")]),
            Err(CorpusError::UnknownClass(_))
        ));
    }

    #[test]
    fn five_way_one_shot_counts() {
        let ds = synthetic(8, 40);
        let classes = ds.classes();
        let ep = sample_episode(&ds, &classes, 5, 1, 25, 11).unwrap();
        assert_eq!(ep.classes.len(), 5);
        assert_eq!(ep.supports.values().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.queries.len(), 125);
    }

    #[test]
    fn zero_shot_episode_has_empty_supports() {
        let ds = synthetic(5, 30);
        let ep = sample_episode(&ds, &ds.classes(), 3, 0, 25, 2).unwrap();
        assert_eq!(ep.supports.len(), 3);
        assert!(ep.supports.values().all(Vec::is_empty));
    }

    #[test]
    fn insufficient_records_names_class() {
        let mut ds = synthetic(3, 10);
        ds.records
            .retain(|r| !(r.label.as_str() == "c01" && r.text.starts_with("text 5")));
        let err = sample_episode(&ds, &ds.classes(), 3, 5, 5, 0).unwrap_err();
        assert!(err.to_string().contains("c01"));
    }

    #[test]
    fn episode_dump_round_trips() {
        let ds = synthetic(4, 10);
        let ep = sample_episode(&ds, &ds.classes(), 2, 2, 3, 9).unwrap();
        let dump = ep.dump();
        let json = serde_json::to_string(&dump).unwrap();
        let back: EpisodeDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back, dump);
        assert_eq!(back.query_records.len(), 6);
    }
}

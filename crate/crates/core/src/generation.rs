//! Pseudo-sample generation from label descriptions.
//!
//! A class description is rendered into an instruction that ends with an
//! opening quotation mark. The generator continues it, and the continuation
//! is cut at the first generated quotation mark. Continuations without a
//! marker, with an empty prefix, over the token budget, or duplicating an
//! accepted sample are rejected and retried with the next seed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, SamplingParams, TextGenerator};
use crate::corpus::ClassId;

pub const DESCRIPTION_PLACEHOLDER: &str = "{description}";

/// Straight double quote plus the curly opening and closing variants.
pub const DEFAULT_END_MARKERS: [char; 3] = ['"', '\u{201C}', '\u{201D}'];

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("template for `{dataset}` is invalid: {reason}")]
    InvalidTemplate { dataset: String, reason: String },
    #[error("no template for dataset `{0}`")]
    MissingTemplate(String),
    #[error("class `{0}` has an empty description")]
    EmptyDescription(ClassId),
    #[error("target_count must be >= 1 and max_attempts >= target_count (got {target_count}, {max_attempts})")]
    BadBudget { target_count: usize, max_attempts: usize },
    #[error("generation yield zero for class `{class}` after {attempts} attempts; rejects: {rejects:?}")]
    YieldZero {
        class: ClassId,
        attempts: usize,
        rejects: BTreeMap<RejectReason, usize>,
    },
    #[error("generator failed: {0}")]
    Backend(#[from] BackendError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub dataset: String,
    pub pattern: String,
}

impl InstructionTemplate {
    /// The pattern must contain `{description}` exactly once and end with a
    /// quotation mark.
    pub fn new(dataset: impl Into<String>, pattern: impl Into<String>) -> Result<Self, GenerationError> {
        let dataset = dataset.into();
        let pattern = pattern.into();
        let invalid = |reason: &str| GenerationError::InvalidTemplate {
            dataset: dataset.clone(),
            reason: reason.to_string(),
        };
        match pattern.matches(DESCRIPTION_PLACEHOLDER).count() {
            1 => {}
            0 => return Err(invalid("missing {description} placeholder")),
            _ => return Err(invalid("{description} placeholder occurs more than once")),
        }
        if !pattern.ends_with(|c| DEFAULT_END_MARKERS.contains(&c)) {
            return Err(invalid("pattern must end with an opening quotation mark"));
        }
        Ok(InstructionTemplate { dataset, pattern })
    }
}

/// Templates for the six benchmark datasets, keyed by lowercase name.
pub fn builtin_templates() -> BTreeMap<String, InstructionTemplate> {
    [
        ("20news", "Here is news about {description}: \""),
        ("amazon", "Here is a product review of {description}:\""),
        ("huffpost", "A news headline about {description}:\""),
        ("reuters", "Here is news about {description}:\""),
        ("snips", "If I want to {description}, I will say \""),
        ("clinc", "If I want to {description}, I will say \""),
    ]
    .into_iter()
    .map(|(k, p)| {
        (
            k.to_string(),
            InstructionTemplate::new(k, p).expect("builtin template is valid"),
        )
    })
    .collect()
}

/// Reads a `{dataset: pattern}` JSON file.
pub fn load_templates(path: &Path) -> Result<BTreeMap<String, InstructionTemplate>, GenerationError> {
    let raw = fs::read_to_string(path).map_err(|source| GenerationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let map: BTreeMap<String, String> = serde_json::from_str(&raw).map_err(|e| GenerationError::Malformed {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    map.into_iter()
        .map(|(k, p)| InstructionTemplate::new(k.clone(), p).map(|t| (k, t)))
        .collect()
}

pub fn render_instruction(template: &InstructionTemplate, description: &str) -> Result<String, GenerationError> {
    let description = description.trim();
    if description.is_empty() {
        return Err(GenerationError::EmptyDescription(ClassId::new("")));
    }
    Ok(template.pattern.replacen(DESCRIPTION_PLACEHOLDER, description, 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescription {
    pub class_id: ClassId,
    pub description: String,
    pub instruction: String,
}

impl ClassDescription {
    pub fn new(class_id: ClassId, description: &str, template: &InstructionTemplate) -> Result<Self, GenerationError> {
        let instruction = render_instruction(template, description).map_err(|e| match e {
            GenerationError::EmptyDescription(_) => GenerationError::EmptyDescription(class_id.clone()),
            other => other,
        })?;
        Ok(ClassDescription {
            class_id,
            description: description.trim().to_string(),
            instruction,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoEndMarker,
    EmptyPrefix,
    OverTokenBudget,
    Duplicate,
}

/// Text before the first end marker, whitespace-trimmed.
pub fn truncate_at_end_marker(raw: &str, markers: &[char]) -> Result<String, RejectReason> {
    let cut = raw.find(|c| markers.contains(&c)).ok_or(RejectReason::NoEndMarker)?;
    let prefix = raw[..cut].trim();
    if prefix.is_empty() {
        Err(RejectReason::EmptyPrefix)
    } else {
        Ok(prefix.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub class_id: ClassId,
    pub text: String,
    pub raw: String,
    pub seed: u64,
    pub truncated_at_marker: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempts: usize,
    pub accepted: usize,
    pub shortfall: usize,
    pub rejects: BTreeMap<RejectReason, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub samples: Vec<GeneratedSample>,
    pub stats: GenerationStats,
}

/// Default attempt budget for a target count.
pub fn default_max_attempts(target_count: usize) -> usize {
    3 * target_count
}

/// Draws continuations with seeds `params.seed + i` for attempt `i` until
/// `target_count` samples are accepted or `max_attempts` is spent.
pub fn generate_class_samples(
    generator: &dyn TextGenerator,
    class: &ClassDescription,
    target_count: usize,
    params: &SamplingParams,
    max_attempts: usize,
    markers: &[char],
) -> Result<GenerationOutcome, GenerationError> {
    if target_count == 0 || max_attempts < target_count {
        return Err(GenerationError::BadBudget {
            target_count,
            max_attempts,
        });
    }
    params.validate()?;
    let mut stats = GenerationStats::default();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for attempt in 0..max_attempts {
        if samples.len() == target_count {
            break;
        }
        let seed = params.seed.wrapping_add(attempt as u64);
        stats.attempts += 1;
        let raw = generator.continue_text(&class.instruction, &params.with_seed(seed))?;
        let verdict = truncate_at_end_marker(&raw, markers).and_then(|text| {
            if generator.count_tokens(&text) > params.max_new_tokens {
                Err(RejectReason::OverTokenBudget)
            } else if seen.contains(&text) {
                Err(RejectReason::Duplicate)
            } else {
                Ok(text)
            }
        });
        match verdict {
            Ok(text) => {
                seen.insert(text.clone());
                samples.push(GeneratedSample {
                    class_id: class.class_id.clone(),
                    text,
                    raw,
                    seed,
                    truncated_at_marker: true,
                });
            }
            Err(reason) => *stats.rejects.entry(reason).or_default() += 1,
        }
    }
    stats.accepted = samples.len();
    stats.shortfall = target_count - samples.len();
    if samples.is_empty() {
        return Err(GenerationError::YieldZero {
            class: class.class_id.clone(),
            attempts: stats.attempts,
            rejects: stats.rejects,
        });
    }
    if stats.shortfall > 0 {
        log::warn!(
            "class `{}`: accepted {} of {} samples after {} attempts",
            class.class_id,
            stats.accepted,
            target_count,
            stats.attempts
        );
    }
    Ok(GenerationOutcome { samples, stats })
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    class_id: ClassId,
    text: String,
    seed: u64,
    raw_len: usize,
}

pub fn write_samples_jsonl(path: &Path, samples: &[GeneratedSample]) -> Result<(), GenerationError> {
    let io = |source| GenerationError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for s in samples {
        let rec = SampleRecord {
            class_id: s.class_id.clone(),
            text: s.text.clone(),
            seed: s.seed,
            raw_len: s.raw.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("sample record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads samples written by [`write_samples_jsonl`]. The raw continuation is
/// not persisted, so `raw` comes back empty.
pub fn read_samples_jsonl(path: &Path) -> Result<Vec<GeneratedSample>, GenerationError> {
    let io = |source| GenerationError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| GenerationError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(GeneratedSample {
            class_id: rec.class_id,
            text: rec.text,
            raw: String::new(),
            seed: rec.seed,
            truncated_at_marker: true,
        });
    }
    Ok(out)
}

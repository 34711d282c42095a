//! The single JSON config file, environment overrides, and validation.
//!
//! Relative paths in a config file are resolved against the file's own
//! directory, so a config can be moved together with its data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anchorframe::backends::registry::{BackendRegistry, BackendSpec};
use anchorframe::corpus::{load_dataset, split_classes, ClassId, Dataset, DatasetFormat};
use anchorframe::evaluation::{ExperimentPlan, PipelineSettings};
use anchorframe::generation::{builtin_templates, load_templates, ClassDescription, InstructionTemplate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "ANCHORFRAME_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    /// `{dataset: pattern}` file; the built-in templates when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// Template key; defaults to the dataset file stem.
    #[serde(default)]
    pub template_key: Option<String>,
    /// Class partition; episodes draw from the test classes. All classes
    /// are test classes when absent.
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    pub descriptions: PathBuf,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Jsonl
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: Vec<ClassId>,
    pub valid: Vec<ClassId>,
    pub test: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub generator: BackendSpec,
    pub encoder: BackendSpec,
    pub scorer: BackendSpec,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            generator: BackendSpec::named("stub"),
            encoder: BackendSpec::named("stub-hash"),
            scorer: BackendSpec::named("stub-logistic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub tasks_per_partition: usize,
    pub n_runs: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 25,
            tasks_per_partition: 10,
            n_runs: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub p_values: Vec<usize>,
}

/// Backend role addressed by `--backend role=name`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Encoder,
    Scorer,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generator" => Ok(Role::Generator),
            "encoder" => Ok(Role::Encoder),
            "scorer" => Ok(Role::Scorer),
            other => Err(format!(
                "unknown backend role `{other}` (expected generator, encoder or scorer)"
            )),
        }
    }
}

/// Sets `path` (lowercase segments) inside `root`, creating objects as needed.
fn set_path(root: &mut serde_json::Value, path: &[String], value: serde_json::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = root;
    for seg in parents {
        if node.is_null() {
            *node = serde_json::Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .ok_or_else(|| format!("`{seg}` is not inside an object"))?
            .entry(seg.clone())
            .or_insert(serde_json::Value::Null);
    }
    if node.is_null() {
        *node = serde_json::Value::Object(Default::default());
    }
    node.as_object_mut()
        .ok_or_else(|| format!("cannot set `{last}` on a non-object"))?
        .insert(last.clone(), value);
    Ok(())
}

/// Applies `ANCHORFRAME_A__B=value` overrides: the key path is lowercased
/// and split on `__`; the value is parsed as JSON, falling back to a string.
pub fn apply_env_overrides(
    raw: &mut serde_json::Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Vec<String> {
    let mut errs = Vec::new();
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, value) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(String::is_empty) {
            errs.push(format!("environment override `{key}` has an empty key segment"));
            continue;
        }
        let parsed = serde_json::from_str(&value).unwrap_or(serde_json::Value::String(value));
        if let Err(e) = set_path(raw, &path, parsed) {
            errs.push(format!("environment override `{key}`: {e}"));
        }
    }
    errs
}

impl PipelineConfig {
    /// Reads `path`, applies environment overrides, and deserializes.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let mut raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(vec![format!("config {}: {e}", path.display())]))?;
        let errs = apply_env_overrides(&mut raw, env);
        if !errs.is_empty() {
            return Err(CliError::Invalid(errs));
        }
        let mut config: PipelineConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::Invalid(vec![format!("config {}: {e}", path.display())]))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.dataset.path);
        resolve(&mut self.dataset.descriptions);
        if let Some(t) = &mut self.templates {
            resolve(t);
        }
        resolve(&mut self.output_dir);
    }

    pub fn set_backend(&mut self, role: Role, name: &str) {
        let slot = match role {
            Role::Generator => &mut self.backends.generator,
            Role::Encoder => &mut self.backends.encoder,
            Role::Scorer => &mut self.backends.scorer,
        };
        // parameters belong to the old backend
        if slot.name != name {
            *slot = BackendSpec::named(name);
        }
    }

    /// Every problem that can be detected without running a stage.
    pub fn validate(&self, registry: &BackendRegistry<f64>) -> Vec<String> {
        let mut errs = Vec::new();
        for (what, path) in [
            ("dataset file", Some(&self.dataset.path)),
            ("descriptions file", Some(&self.dataset.descriptions)),
            ("templates file", self.templates.as_ref()),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    errs.push(format!("{what} not found: {}", p.display()));
                }
            }
        }
        let b = &self.backends;
        if let Err(e) = registry.generator(&b.generator) {
            errs.push(format!(
                "generator backend: {e} (known: {})",
                registry.generator_names().join(", ")
            ));
        }
        if let Err(e) = registry.encoder(&b.encoder) {
            errs.push(format!(
                "encoder backend: {e} (known: {})",
                registry.encoder_names().join(", ")
            ));
        }
        if let Err(e) = registry.scorer(&b.scorer) {
            errs.push(format!(
                "scorer backend: {e} (known: {})",
                registry.scorer_names().join(", ")
            ));
        }
        errs.extend(self.pipeline.validate().into_iter().map(|e| format!("pipeline: {e}")));
        let ep = &self.episode;
        if ep.n_way < 2 {
            errs.push(format!("episode: n_way {} must be at least 2", ep.n_way));
        }
        for (name, v) in [
            ("n_query", ep.n_query),
            ("tasks_per_partition", ep.tasks_per_partition),
            ("n_runs", ep.n_runs),
        ] {
            if v == 0 {
                errs.push(format!("episode: {name} must be at least 1"));
            }
        }
        if self.jobs == 0 {
            errs.push("jobs must be at least 1".into());
        }
        if self.sweep.p_values.contains(&0) {
            errs.push("sweep: p_values must be at least 1".into());
        }
        errs
    }

    /// The config as JSON with every default written out.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hash of the settings that determine stage outputs. `jobs` only
    /// affects scheduling and is left out.
    pub fn output_hash(&self) -> String {
        let mut snap = self.snapshot();
        if let Some(obj) = snap.as_object_mut() {
            obj.remove("jobs");
        }
        let digest = Sha256::digest(serde_json::to_vec(&snap).expect("value serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Dataset, templates and plan, loaded once the config has validated.
pub struct Prepared {
    pub dataset: Dataset,
    pub descriptions: BTreeMap<ClassId, ClassDescription>,
    pub plan: ExperimentPlan,
}

impl PipelineConfig {
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let invalid = |m: String| CliError::Invalid(vec![m]);
        let dataset = load_dataset(&self.dataset.path, self.dataset.format, &self.dataset.descriptions)
            .map_err(|e| invalid(format!("dataset: {e}")))?;
        let templates = match &self.templates {
            Some(p) => load_templates(p).map_err(|e| invalid(format!("templates: {e}")))?,
            None => builtin_templates(),
        };
        let key = self
            .template_key
            .clone()
            .unwrap_or_else(|| dataset.name.to_ascii_lowercase());
        let template: &InstructionTemplate = templates.get(&key).ok_or_else(|| {
            invalid(format!(
                "no template for `{key}` (available: {})",
                templates.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let classes = match &self.split {
            Some(s) => {
                split_classes(&dataset, &s.train, &s.valid, &s.test)
                    .map_err(|e| invalid(format!("split: {e}")))?
                    .test_classes
            }
            None => dataset.classes(),
        };
        if classes.len() < self.episode.n_way {
            return Err(invalid(format!(
                "episode: n_way {} exceeds the {} test classes",
                self.episode.n_way,
                classes.len()
            )));
        }
        let mut descriptions = BTreeMap::new();
        for c in &classes {
            let text = dataset.description(c).expect("loader checks descriptions");
            let d =
                ClassDescription::new(c.clone(), text, template).map_err(|e| invalid(format!("class `{c}`: {e}")))?;
            descriptions.insert(c.clone(), d);
        }
        let plan = ExperimentPlan {
            classes,
            n_way: self.episode.n_way,
            k_shot: self.episode.k_shot,
            n_query: self.episode.n_query,
            n_tasks: self.episode.tasks_per_partition,
            n_runs: self.episode.n_runs,
            master_seed: self.seed,
        };
        Ok(Prepared {
            dataset,
            descriptions,
            plan,
        })
    }
}

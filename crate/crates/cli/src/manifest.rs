//! Append-only record of every invocation and stage outcome in an output
//! directory. It doubles as the ledger that decides which stages a resumed
//! run may reload.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anchorframe::evaluation::{Stage, StageLedger, StageStatus};
use anchorframe::seed::SEED_SCHEME;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub id: usize,
    pub command: String,
    pub tool_version: String,
    pub seed_scheme: String,
    pub started_at: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub invocation: usize,
    pub task: String,
    pub stage: Stage,
    pub status: StageStatus,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub note: Option<String>,
    pub recorded_at: String,
}

/// A file written outside any task, such as a report or summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub invocation: usize,
    pub path: PathBuf,
    pub recorded_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestData {
    pub invocations: Vec<Invocation>,
    pub entries: Vec<StageEntry>,
    pub reports: Vec<ReportEntry>,
}

impl ManifestData {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct RunManifest {
    root: PathBuf,
    invocation: usize,
    config_hash: String,
    data: Mutex<ManifestData>,
    /// First failed write; `record` cannot return errors.
    write_error: Mutex<Option<String>>,
}

impl RunManifest {
    /// Opens (or creates) the manifest under `root` and appends an
    /// invocation for `command`.
    pub fn open(root: &Path, command: &str, config: &PipelineConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::output(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let mut data = if path.exists() {
            ManifestData::read(&path)?
        } else {
            ManifestData::default()
        };
        let invocation = data.invocations.len();
        let config_hash = config.output_hash();
        data.invocations.push(Invocation {
            id: invocation,
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed_scheme: SEED_SCHEME.to_string(),
            started_at: now(),
            config_hash: config_hash.clone(),
            config: config.snapshot(),
        });
        let manifest = RunManifest {
            root: root.to_path_buf(),
            invocation,
            config_hash,
            data: Mutex::new(data),
            write_error: Mutex::new(None),
        };
        manifest.save(&manifest.data.lock().expect("manifest lock"))?;
        Ok(manifest)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn save(&self, data: &ManifestData) -> Result<(), CliError> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(data).expect("manifest serializes") + "\n";
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| CliError::output(&path, e))
    }

    fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }

    fn append(&self, f: impl FnOnce(&mut ManifestData)) {
        let mut data = self.data.lock().expect("manifest lock");
        f(&mut data);
        if let Err(e) = self.save(&data) {
            log::error!("{e}");
            self.write_error
                .lock()
                .expect("error lock")
                .get_or_insert(e.to_string());
        }
    }

    /// Lists a file written outside the per-task stages.
    pub fn record_report(&self, path: &Path) {
        let entry = ReportEntry {
            invocation: self.invocation,
            path: self.relative(path),
            recorded_at: now(),
        };
        self.append(|d| d.reports.push(entry));
    }

    /// Fails if any manifest write failed during the invocation.
    pub fn finish(&self) -> Result<(), CliError> {
        match self.write_error.lock().expect("error lock").take() {
            Some(reason) => Err(CliError::Manifest {
                path: self.root.join(MANIFEST_FILE),
                reason,
            }),
            None => Ok(()),
        }
    }
}

impl StageLedger for RunManifest {
    /// True when the latest entry for `(task, stage)` completed under the
    /// same output-relevant config and tool, and its outputs still exist.
    fn is_complete(&self, task: &str, stage: Stage) -> bool {
        let data = self.data.lock().expect("manifest lock");
        let Some(entry) = data.entries.iter().rev().find(|e| e.task == task && e.stage == stage) else {
            return false;
        };
        let inv = &data.invocations[entry.invocation];
        entry.status == StageStatus::Complete
            && inv.config_hash == self.config_hash
            && inv.tool_version == TOOL_VERSION
            && inv.seed_scheme == SEED_SCHEME
            && entry.outputs.iter().all(|p| self.root.join(p).is_file())
    }

    fn record(
        &self,
        task: &str,
        stage: Stage,
        status: StageStatus,
        outputs: &[PathBuf],
        seed: u64,
        note: Option<String>,
    ) {
        let entry = StageEntry {
            invocation: self.invocation,
            task: task.to_string(),
            stage,
            status,
            outputs: outputs.iter().map(|p| self.relative(p)).collect(),
            seed,
            note,
            recorded_at: now(),
        };
        self.append(|d| d.entries.push(entry));
    }
}

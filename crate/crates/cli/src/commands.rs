use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anchorframe::backends::registry::BackendRegistry;
use anchorframe::evaluation::{
    accuracy, read_task_result, reports_from_results, run_experiment, run_tasks, sweep_anchor_count, task_key,
    weighted_f1, write_summary_csv, write_sweep_csv, Backends, ExperimentContext, ExperimentReport, Reuse, Stage,
};
use anchorframe::screening::EmbeddingCache;
use serde::Serialize;

use crate::config::{PipelineConfig, Prepared};
use crate::error::CliError;
use crate::manifest::RunManifest;

/// Validates `config` and loads everything a command needs.
pub fn prepare(config: &PipelineConfig, registry: &BackendRegistry<f64>) -> Result<Prepared, CliError> {
    let errs = config.validate(registry);
    if !errs.is_empty() {
        return Err(CliError::Invalid(errs));
    }
    config.prepare()
}

/// Builds the backends and runs `f` with a context over the output directory.
fn with_context<R>(
    config: &PipelineConfig,
    registry: &BackendRegistry<f64>,
    prepared: &Prepared,
    manifest: &RunManifest,
    reuse: Reuse,
    f: impl FnOnce(&ExperimentContext<'_, f64>) -> Result<R, CliError>,
) -> Result<R, CliError> {
    // validated already, so construction only fails on a backend bug
    let backend_err = |e: anchorframe::backends::BackendError| CliError::Invalid(vec![e.to_string()]);
    let generator = registry.generator(&config.backends.generator).map_err(backend_err)?;
    let encoder = registry.encoder(&config.backends.encoder).map_err(backend_err)?;
    let make_scorer = || registry.scorer(&config.backends.scorer);
    let backends = Backends {
        generator: generator.as_ref(),
        encoder: encoder.as_ref(),
        make_scorer: &make_scorer,
    };
    let cache = EmbeddingCache::new();
    let ctx = ExperimentContext {
        dataset: &prepared.dataset,
        descriptions: &prepared.descriptions,
        backends: &backends,
        settings: &config.pipeline,
        cache: &cache,
        out_dir: Some(manifest.root().to_path_buf()),
        ledger: manifest,
        scope: String::new(),
        reuse,
        jobs: config.jobs,
    };
    let result = f(&ctx);
    match (result, manifest.finish()) {
        (Ok(r), Ok(())) => Ok(r),
        (Err(e), Err(m)) => {
            log::error!("{m}");
            Err(e)
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

/// Writes `report_<rule>.json` per report into `dir` and lists each file.
fn write_reports(dir: &Path, reports: &[ExperimentReport<f64>], manifest: &RunManifest) -> Result<(), CliError> {
    for r in reports {
        let path = dir.join(format!("report_{}.json", r.rule.short_name()));
        write_json(&path, r)?;
        manifest.record_report(&path);
    }
    Ok(())
}

fn print_table(reports: &[ExperimentReport<f64>]) {
    println!(
        "{:<4} {:>4} {:>5} {:>10} {:>10} {:>6}",
        "rule", "P", "shot", "mean_acc", "mean_f1", "tasks"
    );
    for r in reports {
        println!(
            "{:<4} {:>4} {:>5} {:>10.4} {:>10.4} {:>6}",
            r.rule.short_name(),
            r.p_count,
            r.k_shot,
            r.mean_acc,
            r.mean_f1,
            r.per_task.len()
        );
    }
}

/// Runs every task up to `until`: the `generate`, `screen`, `train` and
/// `predict` subcommands.
pub fn stage(
    command: &str,
    config: &PipelineConfig,
    registry: &BackendRegistry<f64>,
    until: Stage,
    resume: bool,
) -> Result<(), CliError> {
    let prepared = prepare(config, registry)?;
    let manifest = RunManifest::open(&config.output_dir, command, config)?;
    let reuse = if resume {
        Reuse::AllCompleted
    } else {
        Reuse::CompletedBefore(until)
    };
    let outputs = with_context(config, registry, &prepared, &manifest, reuse, |ctx| {
        Ok(run_tasks(ctx, &prepared.plan, until)?)
    })?;
    println!(
        "{until}: {} tasks done under {}",
        outputs.len(),
        config.output_dir.display()
    );
    Ok(())
}

pub fn run(config: &PipelineConfig, registry: &BackendRegistry<f64>, resume: bool) -> Result<(), CliError> {
    let prepared = prepare(config, registry)?;
    let manifest = RunManifest::open(&config.output_dir, "run", config)?;
    let reuse = if resume { Reuse::AllCompleted } else { Reuse::Nothing };
    let reports = with_context(config, registry, &prepared, &manifest, reuse, |ctx| {
        Ok(run_experiment(ctx, &prepared.plan)?)
    })?;
    write_reports(&config.output_dir, &reports, &manifest)?;
    let summary = config.output_dir.join("summary.csv");
    write_summary_csv(&summary, &reports).map_err(|e| CliError::output(&summary, e))?;
    manifest.record_report(&summary);
    manifest.finish()?;
    print_table(&reports);
    Ok(())
}

/// Drops repeated counts, keeping first occurrences in order.
pub fn dedup_p_values(values: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &p in values {
        if seen.insert(p) {
            out.push(p);
        } else {
            log::warn!("duplicate anchor count {p} in sweep; running it once");
        }
    }
    out
}

pub fn sweep(
    config: &PipelineConfig,
    registry: &BackendRegistry<f64>,
    p_values: &[usize],
    resume: bool,
) -> Result<(), CliError> {
    let p_values = dedup_p_values(p_values);
    if p_values.is_empty() {
        return Err(CliError::Invalid(vec![
            "sweep needs anchor counts (--p-values or sweep.p_values)".into(),
        ]));
    }
    if p_values.contains(&0) {
        return Err(CliError::Invalid(
            vec!["sweep: anchor counts must be at least 1".into()],
        ));
    }
    let prepared = prepare(config, registry)?;
    let manifest = RunManifest::open(&config.output_dir, "sweep", config)?;
    let reuse = if resume { Reuse::AllCompleted } else { Reuse::Nothing };
    let reports = with_context(config, registry, &prepared, &manifest, reuse, |ctx| {
        Ok(sweep_anchor_count(ctx, &prepared.plan, &p_values)?)
    })?;
    for &p in &p_values {
        let of_p: Vec<_> = reports.iter().filter(|r| r.p_count == p).cloned().collect();
        write_reports(&config.output_dir.join(format!("p{p}")), &of_p, &manifest)?;
    }
    let csv = config.output_dir.join("sweep.csv");
    write_sweep_csv(&csv, &reports).map_err(|e| CliError::output(&csv, e))?;
    manifest.record_report(&csv);
    manifest.finish()?;
    print_table(&reports);
    Ok(())
}

/// Rebuilds reports from persisted per-task results. Metrics are recomputed
/// from each stored confusion matrix rather than trusted.
pub fn report(config: &PipelineConfig, registry: &BackendRegistry<f64>) -> Result<(), CliError> {
    let prepared = prepare(config, registry)?;
    let plan = &prepared.plan;
    let mut results = Vec::new();
    for (run, task) in plan.task_keys() {
        let dir: PathBuf = config.output_dir.join(task_key(run, task));
        for &rule in &config.pipeline.rules {
            let mut r = read_task_result::<f64>(&dir, rule).map_err(|e| CliError::MissingResult {
                path: dir.join(format!("result_{}.json", rule.short_name())),
                reason: e.to_string(),
            })?;
            let metric_err = |e: anchorframe::evaluation::MetricError| CliError::MissingResult {
                path: dir.clone(),
                reason: e.to_string(),
            };
            let acc = accuracy(&r.confusion).map_err(metric_err)?;
            let f1 = weighted_f1(&r.confusion).map_err(metric_err)?;
            if acc != r.accuracy || f1 != r.weighted_f1 {
                log::warn!(
                    "{}: stored metrics disagree with its confusion matrix; using recomputed",
                    r.task
                );
            }
            r.accuracy = acc;
            r.weighted_f1 = f1;
            results.push(r);
        }
    }
    let reports = reports_from_results(&prepared.dataset.name, plan, &config.pipeline, results);
    let manifest = RunManifest::open(&config.output_dir, "report", config)?;
    write_reports(&config.output_dir, &reports, &manifest)?;
    let summary = config.output_dir.join("summary.csv");
    write_summary_csv(&summary, &reports).map_err(|e| CliError::output(&summary, e))?;
    manifest.record_report(&summary);
    manifest.finish()?;
    print_table(&reports);
    Ok(())
}

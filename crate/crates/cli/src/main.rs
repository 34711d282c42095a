//! `anchorframe`: run the generate, screen, train and predict stages over
//! episodes described by one JSON config file.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or arguments,
//! 2 when a stage fails.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anchorframe::backends::registry::BackendRegistry;
use anchorframe::evaluation::Stage;
use anchorframe::prediction::Rule;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{PipelineConfig, Role};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "anchorframe",
    version,
    about = "Zero- and few-shot text classification from label descriptions"
)]
struct Cli {
    /// Pipeline config (JSON). Keys can be overridden with
    /// `ANCHORFRAME_<KEY>__<SUBKEY>=value` environment variables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prediction rule(s) to apply.
    #[arg(long, global = true, value_enum)]
    rule: Option<RuleArg>,
    /// Worker threads for independent tasks.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Reload every stage the manifest lists as complete.
    #[arg(long, global = true)]
    resume: bool,
    /// Swap a backend, e.g. `--backend scorer=stub-oracle`. Repeatable.
    #[arg(long = "backend", global = true, value_name = "ROLE=NAME", value_parser = parse_backend)]
    backends: Vec<(Role, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    Top,
    Avg,
    Both,
}

impl RuleArg {
    fn rules(self) -> Vec<Rule> {
        match self {
            RuleArg::Top => vec![Rule::TopOne],
            RuleArg::Avg => vec![Rule::Average],
            RuleArg::Both => vec![Rule::TopOne, Rule::Average],
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate pseudo samples for every class of every episode.
    Generate,
    /// Generate, then screen anchors.
    Screen,
    /// Run through scorer training.
    Train,
    /// Run through prediction without writing reports.
    Predict,
    /// Full pipeline plus reports and summary.csv.
    Run,
    /// Repeat the full pipeline for several anchor counts.
    Sweep {
        /// Anchor counts, comma separated; defaults to `sweep.p_values`.
        #[arg(long, value_delimiter = ',')]
        p_values: Vec<usize>,
    },
    /// Rebuild reports from the per-task results already on disk.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Screen => "screen",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Run => "run",
            Command::Sweep { .. } => "sweep",
            Command::Report => "report",
        }
    }
}

fn parse_backend(s: &str) -> Result<(Role, String), String> {
    let (role, name) = s
        .split_once('=')
        .ok_or_else(|| format!("expected ROLE=NAME, got `{s}`"))?;
    if name.is_empty() {
        return Err(format!("empty backend name in `{s}`"));
    }
    Ok((role.parse()?, name.to_string()))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Invalid(vec!["--config is required".into()]))?;
    let mut config = PipelineConfig::load(path, std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(rule) = cli.rule {
        config.pipeline.rules = rule.rules();
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    for (role, name) in &cli.backends {
        config.set_backend(*role, name);
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let registry = BackendRegistry::with_builtins();
    let name = cli.command.name();
    match &cli.command {
        Command::Generate => commands::stage(name, &config, &registry, Stage::Generation, cli.resume),
        Command::Screen => commands::stage(name, &config, &registry, Stage::Screening, cli.resume),
        Command::Train => commands::stage(name, &config, &registry, Stage::Training, cli.resume),
        Command::Predict => commands::stage(name, &config, &registry, Stage::Prediction, cli.resume),
        Command::Run => commands::run(&config, &registry, cli.resume),
        Command::Sweep { p_values } => {
            let p = if p_values.is_empty() {
                &config.sweep.p_values
            } else {
                p_values
            };
            commands::sweep(&config, &registry, p, cli.resume)
        }
        Command::Report => commands::report(&config, &registry),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `kgeval` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{flag, usage, ExperimentConfig, UsageError, KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "kgeval",
    version,
    about = "Evaluation toolkit for knowledge graph completion",
    after_help = "Every configuration key can be given as --<key> (underscores become dashes), \
                  as --set key=value, or in the --config file; flags override the file."
)]
struct Cli {
    /// Flat key=value configuration file (`#` starts a comment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Micro and macro metric reports for every run.
    Evaluate,
    /// Writes a synthetic baseline run (frequency, random or oracle-noise).
    Baseline,
    /// Writes the qid mapping of the test questions.
    Questions,
    /// Judgment pool construction.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Annotation campaign management.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Meta-evaluation of metrics and judgment regimes.
    #[command(subcommand)]
    Meta(MetaCommand),
    /// Relation distributions.
    #[command(subcommand)]
    Dist(DistCommand),
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum PoolCommand {
    /// Unions the top-depth candidates of the runs for the seed questions.
    Build,
    /// Marks trivially negative pending entries.
    Filter,
    /// Renders pending entries into a new campaign directory.
    Render,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum AnnotateCommand {
    /// Serves the annotation HTTP API for a campaign.
    Serve,
    /// Applies a batch judgment TSV to a campaign.
    Import,
    /// Writes the campaign's complete judgments and qrels.
    Export,
    /// Reports raw inter-annotator agreement.
    Agreement,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum MetaCommand {
    /// Kendall's tau between the system rankings of two report tables.
    Tau,
    /// Tau between sparse labels and labels from each pooling depth.
    DepthSweep,
    /// Mean tau between full-set and subsample rankings.
    Stability,
    /// Paired t-test p-values over all system pairs.
    Power,
    /// Tau per relation category and direction, sparse vs complete labels.
    Categories,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum DistCommand {
    /// KL divergence between the relation distributions of two triple files.
    Kld,
    /// Relation counts of a triple file.
    Counts,
}

fn command_with_keys() -> clap::Command {
    let keys = KEYS.iter().map(|(k, help)| {
        Arg::new(*k)
            .long(flag(k))
            .global(true)
            .value_name("VALUE")
            .help(*help)
            .help_heading("Configuration")
    });
    Cli::command().args(keys)
}

fn resolve(cli: &Cli, matches: &ArgMatches) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| {
            if e.is::<UsageError>() {
                e
            } else {
                usage(format!("{e:#}"))
            }
        })?,
        None => ExperimentConfig::default(),
    };
    // Global values are propagated down, so the innermost subcommand sees them all.
    let mut leaf = matches;
    while let Some((_, sub)) = leaf.subcommand() {
        leaf = sub;
    }
    for (k, _) in KEYS {
        if let Some(v) = leaf.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = match command_with_keys().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = resolve(&cli, &matches).and_then(|cfg| commands::run(cli.command, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

//! `surfmetric` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
//! 3 numeric abort.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "surfmetric",
    version,
    about = "Triplet-network surface anomaly detection"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Reduce gradients in a fixed order for bit-reproducible runs.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic texture dataset to --out.
    Synth(commands::SynthArgs),
    /// Scan a dataset and write index.json.
    Index(commands::DataArgs),
    /// Train one network per repetition seed.
    Train(commands::TrainArgs),
    /// Build prototypes, score the test images and write the AUC report.
    Eval(commands::EvalArgs),
    /// Score a single image against a prototype.
    Score(commands::ScoreArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<surfmetric::Error>() {
        return match e {
            surfmetric::Error::Io { .. }
            | surfmetric::Error::Image { .. }
            | surfmetric::Error::Layout(_)
            | surfmetric::Error::Checkpoint(_) => 2,
            surfmetric::Error::NumericAbort(_) => 3,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
    {
        return 2;
    }
    1
}

fn build_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(d) = common.deterministic {
        cfg.deterministic_reduction = d;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = build_config(&cli.common)?;
    match &cli.command {
        Command::Synth(a) => a.apply(&mut cfg),
        Command::Index(a) => a.apply(&mut cfg),
        Command::Train(a) => a.apply(&mut cfg),
        Command::Eval(a) => a.apply(&mut cfg),
        Command::Score(a) => a.apply(&mut cfg),
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| UsageError(format!("cannot configure {} threads: {e}", cfg.threads)))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Index(_) => commands::index(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Score(a) => commands::score(&cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

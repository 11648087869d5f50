use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qeleak_core::config::{Method, RunConfig};
use qeleak_core::pipeline::{Pipeline, Stage, StageOutcome};
use qeleak_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PROVIDER: u8 = 3;

/// Audit LLM query expansion for leaked gold evidence.
#[derive(Debug, Parser)]
#[command(name = "qeleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory holding stage outputs and the run manifest.
    #[arg(long, global = true, value_name = "PATH", default_value = "run")]
    run_dir: PathBuf,

    /// Response cache location (default: <run-dir>/cache).
    #[arg(long, global = true, value_name = "PATH")]
    cache_dir: Option<PathBuf>,

    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,

    /// Retrieval depth.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Generation repeats per claim.
    #[arg(long, global = true)]
    repeats: Option<usize>,

    /// Use the offline mock provider.
    #[arg(long, global = true)]
    mock: bool,

    /// Judge every evidence/sentence pair (true) or stop at the first entailment.
    #[arg(long, global = true, value_name = "BOOL", value_parser = clap::value_parser!(bool))]
    exhaustive: Option<bool>,

    /// Rerun completed stages and accept configuration changes.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate claims and corpus.
    Ingest,
    /// Build the BM25 or dense index.
    Index,
    /// Generate pseudo-documents.
    Expand,
    /// Retrieve with and without expansion and score the rankings.
    Retrieve,
    /// Detect generated sentences entailed by gold evidence.
    Match,
    /// Predict verdicts from retrieved evidence.
    Verdict,
    /// Write report.json and report.txt.
    Report,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Ingest => vec![Stage::Ingest],
            Command::Index => vec![Stage::Index],
            Command::Expand => vec![Stage::Expand],
            Command::Retrieve => vec![Stage::Retrieve],
            Command::Match => vec![Stage::Match],
            Command::Verdict => vec![Stage::Verdict],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Locked(_) => EXIT_DATA,
        Error::Provider(_) => EXIT_PROVIDER,
        Error::MissingPrerequisites { .. } | Error::ConfigDrift => EXIT_USAGE,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.cache_dir {
        cfg.provider.cache_dir = Some(dir.clone());
    }
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = r;
    }
    if cli.mock {
        cfg.provider.mock = true;
    }
    if let Some(x) = cli.exhaustive {
        cfg.exhaustive = x;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::open(&cli.run_dir, cfg, cli.force)?;
    for stage in cli.command.stages() {
        let outcome = pipeline.run(stage)?;
        let word = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::Skipped => "up to date",
        };
        eprintln!("{}: {word}", stage.name());
        if stage == Stage::Report {
            let txt = cli.run_dir.join("report.txt");
            let text = std::fs::read_to_string(&txt).map_err(|e| qeleak_core::DataError::io(&txt, e))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

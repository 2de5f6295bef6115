use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdt_core::harness::{ExperimentConfig, Pipeline, Stage};
use mdt_core::Error;

/// Missing-data recognition workbench: classical vs state-dependent oracle masks.
#[derive(Parser, Debug)]
#[command(name = "mdt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (sectioned key = value text).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the corpus and mix noise at every configured SNR.
    GenCorpus(Common),
    /// Compute observation and mask-estimation features.
    Features(Common),
    /// Train the word and silence HMMs.
    TrainHmm(Common),
    /// Compute classical oracle masks.
    OracleMasks(Common),
    /// Forced-align every utterance against its transcription.
    Align(Common),
    /// Train the per-state mask estimator bank.
    TrainEstimators(Common),
    /// Decode the test set under every configured method.
    Decode(Common),
    /// Score the decoded test set.
    Evaluate(Common),
    /// Write report.txt, report.csv and curves.dat.
    Report(Common),
    /// Run every stage that is not up to date.
    RunAll(Common),
}

impl Command {
    fn parts(&self) -> (Option<Stage>, &Common) {
        match self {
            Command::GenCorpus(c) => (Some(Stage::GenCorpus), c),
            Command::Features(c) => (Some(Stage::Features), c),
            Command::TrainHmm(c) => (Some(Stage::TrainHmm), c),
            Command::OracleMasks(c) => (Some(Stage::OracleMasks), c),
            Command::Align(c) => (Some(Stage::Align), c),
            Command::TrainEstimators(c) => (Some(Stage::TrainEstimators), c),
            Command::Decode(c) => (Some(Stage::Decode), c),
            Command::Evaluate(c) => (Some(Stage::Evaluate), c),
            Command::Report(c) => (Some(Stage::Report), c),
            Command::RunAll(c) => (None, c),
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut d = ExperimentConfig::default();
            d.output = std::env::current_dir().unwrap_or_default().join(&d.output);
            d
        }
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(o) = &c.output {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Command) -> Result<(), Error> {
    let (stage, common) = cmd.parts();
    let pipeline = Pipeline::new(load_config(common)?)?;
    match stage {
        Some(s) => {
            pipeline.run_stage(s)?;
            println!("{}: done", s.name());
            if s == Stage::Report {
                let p = pipeline.layout.report_txt();
                print!("{}", std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?);
            }
        }
        None => {
            let summary = pipeline.run_all()?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(" ");
            println!("executed: {}", names(&summary.executed));
            println!("skipped: {}", names(&summary.skipped));
            println!("report: {}", pipeline.layout.report_txt().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

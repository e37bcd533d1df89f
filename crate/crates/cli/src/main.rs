use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xldv::config::ExperimentConfig;
use xldv::error::ErrorClass;
use xldv::pipeline::{run_root, Outcome, Pipeline};
use xldv::Error;

#[derive(Parser)]
#[command(name = "xldv", version, about = "Cross-lingual speaker verification experiments")]
struct Cli {
    /// INI-style experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set ctdnn.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for run directories (falls back to XLDV_RUN_DIR, then ./runs).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Base seed (same as `--set run.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Synthesise the corpus.
    Synth,
    /// Filterbank and MFCC features.
    Feats,
    /// Phone classifier and linguistic-factor extractor.
    TrainAsr,
    /// Phone-blind and phone-aware CT-DNNs.
    TrainCtdnn,
    /// GMM universal background model.
    TrainUbm,
    /// Total-variability matrix.
    TrainTv,
    /// i-vectors and d-vectors.
    Extract,
    /// Cosine, LDA and PLDA back-ends.
    BackendTrain,
    /// Trial lists and score files.
    Score,
    /// EER grid.
    Eval,
    /// Human-readable report.
    Report,
    /// Every stage in order.
    All,
    /// Print every materialised configuration value.
    ValidateConfig,
    /// Print the run directory for this configuration.
    RunDir,
}

impl Command {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Command::Synth => "synth",
            Command::Feats => "feats",
            Command::TrainAsr => "train-asr",
            Command::TrainCtdnn => "train-ctdnn",
            Command::TrainUbm => "train-ubm",
            Command::TrainTv => "train-tv",
            Command::Extract => "extract",
            Command::BackendTrain => "backend-train",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::Report => "report",
            _ => return None,
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn fail(kind: &str, code: u8, msg: &str) -> ExitCode {
    eprintln!("xldv-error kind={kind} exit={code} message={}", msg.replace(['\n', '\r'], " "));
    ExitCode::from(code)
}

fn load_config(cli: &Cli) -> xldv::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set(&format!("run.seed={s}"))?;
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> xldv::Result<()> {
    let cfg = load_config(cli)?;
    if cli.command == Command::ValidateConfig {
        cfg.validate()?;
        print!("{}", cfg.report());
        return Ok(());
    }
    let mut p = Pipeline::open(cfg, &run_root(cli.run_dir.as_deref()))?;
    if cli.command == Command::RunDir {
        println!("{}", p.dir.display());
        return Ok(());
    }
    let stages: Vec<&str> = match cli.command.stage() {
        Some(s) => vec![s],
        None => xldv::pipeline::STAGES.to_vec(),
    };
    for s in stages {
        let o = p.run(s)?;
        println!("{s}\t{}", if o == Outcome::Ran { "ran" } else { "up-to-date" });
    }
    println!("run-dir\t{}", p.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", 1, first);
        }
    };
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            return fail("usage", 1, &e.to_string());
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            fail(e.kind(), code, &e.to_string())
        }
    }
}

//! Batch scenario runner for the memory-poisoning laboratory.
//!
//! Exit codes: 0 success, 1 experiment failure, 2 configuration error.

mod config;
mod runner;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CorpusSource, ExperimentKind, ScenarioConfig};
use driftlab::corpus::{generate_desk_corpus, GeneratorSpec};

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Deterministic memory-poisoning laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file (JSON lines).
    GenerateCorpus {
        /// Generator seed; identical seeds produce byte-identical corpora.
        #[arg(long)]
        seed: u64,
        /// Output path.
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
    },
    /// Validate a scenario config without running it.
    Validate {
        /// Path to the scenario config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured experiments and write report tables.
    Run(RunArgs),
    /// Summarize a finished run directory.
    Report {
        /// Run directory (defaults to the configured output directory).
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to the scenario config (JSON). Without it, a default generated
    /// scenario is used; a seed is then required.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override top-k retrieval depth.
    #[arg(long)]
    k: Option<usize>,
    /// Override write-back.
    #[arg(long)]
    write_back: Option<bool>,
    /// Override the provenance-label defense.
    #[arg(long)]
    mpifc: Option<bool>,
    /// Override the retrieval-concentration monitor.
    #[arg(long)]
    rcm: Option<bool>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Restrict to specific experiments.
    #[arg(long, value_enum, value_delimiter = ',')]
    experiments: Vec<ExperimentKind>,
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig, String> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?
        }
        None => {
            let seed = args
                .seed
                .ok_or("--seed is required without a config file")?;
            ScenarioConfig::default_generated(seed)
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        if let CorpusSource::Generate { seed: s } = &mut config.corpus {
            *s = Some(seed);
        }
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(write_back) = args.write_back {
        config.write_back = write_back;
    }
    if let Some(mpifc) = args.mpifc {
        config.defenses.mpifc = mpifc;
    }
    if let Some(rcm) = args.rcm {
        config.defenses.rcm = rcm;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = Some(dir.clone());
    }
    if !args.experiments.is_empty() {
        config.experiments = args.experiments.clone();
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateCorpus { seed, out } => {
            let corpus = generate_desk_corpus(seed, &GeneratorSpec::default_desk());
            match fs::write(&out, corpus.to_jsonl()) {
                Ok(()) => {
                    println!(
                        "wrote {} entries and {} background documents to {}",
                        corpus.entries.len(),
                        corpus.backgrounds.len(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("cannot write {}: {e}", out.display());
                    ExitCode::from(2)
                }
            }
        }
        Command::Validate { config } => {
            let text = match fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let parsed: ScenarioConfig = match serde_json::from_str(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("invalid config: {e}");
                    return ExitCode::from(2);
                }
            };
            let issues = parsed.validate();
            if issues.is_empty() {
                println!("config ok");
                ExitCode::SUCCESS
            } else {
                for issue in &issues {
                    eprintln!("{issue}");
                }
                ExitCode::from(2)
            }
        }
        Command::Run(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let issues = config.validate();
            if !issues.is_empty() {
                for issue in &issues {
                    eprintln!("{issue}");
                }
                return ExitCode::from(2);
            }
            match runner::run(&config) {
                Ok(failures) if failures.is_empty() => {
                    println!(
                        "run complete: artifacts in {}",
                        runner::resolve_output_dir(&config).display()
                    );
                    ExitCode::SUCCESS
                }
                Ok(failures) => {
                    eprintln!(
                        "{} experiment(s) failed: {}",
                        failures.len(),
                        failures.join(", ")
                    );
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("run failed: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Report { dir } => match runner::report(&dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{e:#}");
                ExitCode::from(1)
            }
        },
    }
}

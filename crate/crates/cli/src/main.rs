//! Command-line front end for the slot-filling experiments.
//!
//! Exit codes: 0 on success, 1 when the input fails validation, 2 when a
//! run fails after validation.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use slotprompt::corpus::{generate_synthetic_corpus, load_corpus, write_corpus, SynthSpec};
use slotprompt::eval::{inverse_examples, main_examples, PipelineConfig};
use slotprompt::experiment::{emit_report, run_loaded, train_experiment, ExperimentConfig, ReportFormat};
use slotprompt::prompting::write_examples;

#[derive(Parser)]
#[command(name = "slotprompt", version, about = "Generative prompt learning for cross-domain slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus (JSON lines) from a synthesis spec.
    Synth {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build main and inverse task examples for every utterance of a corpus.
    Prepare {
        corpus: PathBuf,
        out: PathBuf,
        /// Pipeline settings (template, negatives, query scope) as JSON.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and checkpoint the full pipeline for every target and seed.
    Train { config: PathBuf },
    /// Run every protocol in the config and write the report.
    Eval { config: PathBuf },
    /// Merge report files and print them.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: String,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Validation(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let spec = SynthSpec::from_file(&spec)
                .with_context(|| format!("reading {}", spec.display()))
                .map_err(validation)?;
            let (corpus, registry) = generate_synthetic_corpus(&spec, seed).map_err(validation)?;
            write_corpus(&out, &corpus).map_err(runtime)?;
            println!("wrote {} utterances over {} slot types to {}", corpus.len(), registry.len(), out.display());
        }
        Command::Prepare { corpus, out, pipeline, seed } => {
            let (utterances, registry) = load_corpus(&corpus)
                .with_context(|| format!("reading {}", corpus.display()))
                .map_err(validation)?;
            let config = match pipeline {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))
                        .map_err(validation)?;
                    let config: PipelineConfig = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))
                        .map_err(validation)?;
                    config.validate().map_err(validation)?;
                    config
                }
                None => PipelineConfig::default(),
            };
            std::fs::create_dir_all(&out).map_err(runtime)?;
            let main = main_examples(&utterances, &registry, &config);
            let inverse = inverse_examples(&utterances, &registry, &config, seed);
            write_examples(out.join("main.jsonl"), &main).map_err(runtime)?;
            write_examples(out.join("inverse.jsonl"), &inverse).map_err(runtime)?;
            std::fs::write(out.join("registry.json"), serde_json::to_string_pretty(&registry).map_err(runtime)?).map_err(runtime)?;
            println!("wrote {} main and {} inverse examples to {}", main.len(), inverse.len(), out.display());
        }
        Command::Train { config } => {
            ExperimentConfig::load(&config).map_err(validation)?;
            let dirs = train_experiment(&config).map_err(runtime)?;
            for dir in dirs {
                println!("{}", dir.display());
            }
        }
        Command::Eval { config } => {
            let loaded = ExperimentConfig::load(&config).map_err(validation)?;
            let output = run_loaded(&loaded).map_err(runtime)?;
            print!("{}", slotprompt::eval::render_table(&output.report));
            println!("report: {}", output.report_path.display());
        }
        Command::Report { paths, format } => {
            let format: ReportFormat = format.parse().map_err(validation)?;
            let rendered = emit_report(&paths, format).map_err(validation)?;
            print!("{rendered}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

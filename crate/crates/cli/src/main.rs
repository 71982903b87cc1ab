//! `implicit-sent`: prepare data, train, evaluate, predict, gradient-check
//! and run replicate experiments for the implicit-sentiment classifiers.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training or numeric failure.

mod commands;
mod config;
mod error;

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use implicit_sent::metrics::format_table;
use implicit_sent::ModelKind;

use commands::SynthTask;
use config::ConfigArgs;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "implicit-sent", version, about = "Implicit-sentiment polarity classifiers")]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

fn model_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: implicit_sent::ModelError| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drop test sentences that also occur in the training file.
    Prepare(ConfigArgs),
    /// Train one model; writes config.txt, epochs.jsonl and model.ckpt.
    Train(ConfigArgs),
    /// Score a checkpoint on a labelled test file.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Label sentences with a trained checkpoint.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// `id<TAB>tokens` per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Architectures to check (default: all five).
        #[arg(long, value_delimiter = ',', value_parser = model_kind)]
        models: Vec<ModelKind>,
        /// Skip the per-layer checks.
        #[arg(long)]
        no_layers: bool,
        /// Also run a fixture with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        corrupted_fixture: bool,
    },
    /// Replicate runs for several models and a comparison table.
    Experiment {
        /// Models to compare (default: all five).
        #[arg(long, value_delimiter = ',', value_parser = model_kind)]
        models: Vec<ModelKind>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic corpus with matching embeddings.
    Synth {
        #[arg(long, value_enum, default_value = "order")]
        task: SynthTask,
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        #[arg(long, default_value_t = 500)]
        test_size: usize,
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn all_if_empty(models: Vec<ModelKind>) -> Vec<ModelKind> {
    if models.is_empty() {
        ModelKind::ALL.to_vec()
    } else {
        models
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(args) => {
            let s = commands::prepare(&args)?;
            println!("removed {} test sentence(s) shared with the training file; {} kept", s.removed.len(), s.kept);
            for id in s.removed {
                println!("{id}");
            }
        }
        Command::Train(args) => {
            let s = commands::train(&args)?;
            println!("best epoch {}", s.best_epoch);
            if let Some(report) = s.test {
                print!("{}", format_table(&[("test".to_string(), report)]));
            }
        }
        Command::Evaluate { checkpoint, config } => {
            let row = commands::evaluate_checkpoint(&config, &checkpoint)?;
            print!("{}", format_table(&[row]));
        }
        Command::Predict {
            checkpoint,
            embeddings,
            input,
            output,
        } => {
            let mut sink: Box<dyn Write> = match &output {
                Some(path) => Box::new(io::BufWriter::new(
                    std::fs::File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?,
                )),
                None => Box::new(io::stdout().lock()),
            };
            commands::predict(&checkpoint, &embeddings, &input, sink.as_mut())?;
        }
        Command::Gradcheck {
            models,
            no_layers,
            corrupted_fixture,
        } => {
            let outcomes = commands::gradcheck(&all_if_empty(models), !no_layers, corrupted_fixture);
            for o in &outcomes {
                println!("{}", commands::describe(o));
            }
            let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
            if let Some(worst) = failed.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)) {
                return Err(CliError::numeric(format!(
                    "{} of {} gradient checks failed; worst: {} parameter #{} (max rel err {:.2e})",
                    failed.len(),
                    outcomes.len(),
                    worst.name,
                    worst.report.worst_param,
                    worst.report.max_rel_error
                )));
            }
        }
        Command::Experiment { models, config } => {
            let s = commands::experiment(&config, &all_if_empty(models))?;
            if !s.rows.is_empty() {
                print!("{}", format_table(&s.rows));
            }
            if let Some((_, first)) = s.failures.first() {
                for (kind, e) in &s.failures {
                    eprintln!("error: {kind}: {e}");
                }
                return Err(CliError::new(first.kind, format!("{} model(s) failed", s.failures.len())));
            }
        }
        Command::Synth {
            task,
            train_size,
            test_size,
            dim,
            seed,
            out,
        } => {
            for path in commands::synth(task, train_size, test_size, dim, seed, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `dapa`: synthesize corpora, train, evaluate, export predictions and run
//! gradient checks.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dapa_core::error::ErrorClass;
use dapa_core::model::UnknownDomainPolicy;

use commands::{EvalArgs, PredictArgs, SplitChoice, SynthArgs, TrainArgs};
use config::Precision;

#[derive(Debug, Parser)]
#[command(name = "dapa", version, about = "Dyadic engagement estimation")]
struct Cli {
    /// Threads for data-parallel work; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyChoice {
    Error,
    MeanPrompt,
}

impl From<PolicyChoice> for UnknownDomainPolicy {
    fn from(p: PolicyChoice) -> Self {
        match p {
            PolicyChoice::Error => UnknownDomainPolicy::Error,
            PolicyChoice::MeanPrompt => UnknownDomainPolicy::MeanPrompt,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dyadic corpus (manifest, features, labels).
    Synth {
        /// TOML synthetic-corpus spec; missing keys take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes history.csv, config.toml, last/ and best/.
    Train {
        /// TOML run config with [model], [train] and [data] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus manifest (overrides data.manifest).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a saved checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
        /// Score the training split after every epoch.
        #[arg(long)]
        eval_train: bool,
        /// Stop once the training CCC reaches this value.
        #[arg(long)]
        target_train_ccc: Option<f64>,
    },
    /// Per-dataset and global CCC of a checkpoint on a corpus.
    Eval {
        #[arg(long, required_unless_present = "labels_as_predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// CSV of `domain,dataset` rows grouping domains into datasets.
        #[arg(long)]
        dataset_map: Option<PathBuf>,
        /// Report directory (default: <checkpoint>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitChoice,
        #[arg(long, value_enum)]
        unknown_domain: Option<PolicyChoice>,
        /// Debug: score the labels against themselves.
        #[arg(long)]
        labels_as_predictions: bool,
    },
    /// Export frame-level predictions as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitChoice,
        #[arg(long, value_enum)]
        unknown_domain: Option<PolicyChoice>,
    },
    /// Finite-difference gradient checks of every block in 64-bit.
    Gradcheck {
        /// Include the end-to-end model and loss.
        #[arg(long)]
        full: bool,
    },
}

fn run(command: Command, out: &mut dyn Write) -> dapa_core::Result<bool> {
    match command {
        Command::Synth { spec, out: dir, seed } => commands::synth(&SynthArgs { spec, out: dir, seed }, out),
        Command::Train {
            config,
            data,
            out: dir,
            resume,
            seed,
            epochs,
            lr,
            batch,
            precision,
            eval_train,
            target_train_ccc,
        } => commands::train(
            &TrainArgs {
                config,
                data,
                out: dir,
                resume,
                seed,
                epochs,
                lr,
                batch,
                precision,
                eval_train,
                target_train_ccc,
            },
            out,
        ),
        Command::Eval {
            checkpoint,
            data,
            dataset_map,
            out: dir,
            split,
            unknown_domain,
            labels_as_predictions,
        } => commands::eval(
            &EvalArgs {
                checkpoint,
                data,
                dataset_map,
                out: dir,
                split,
                unknown_domain: unknown_domain.map(Into::into),
                labels_as_predictions,
            },
            out,
        ),
        Command::Predict {
            checkpoint,
            data,
            out: file,
            split,
            unknown_domain,
        } => commands::predict(
            &PredictArgs {
                checkpoint,
                data,
                out: file,
                split,
                unknown_domain: unknown_domain.map(Into::into),
            },
            out,
        ),
        Command::Gradcheck { full } => commands::gradcheck(full, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DAPA_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli.command, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use bugsynth::annotator::BugType;
use bugsynth::mutation::Multiplicity;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Train and evaluate neural bug detectors on injected mutants.
///
/// Every option can also be set through an environment variable named
/// `BUGSYNTH_<OPTION>`, e.g. `BUGSYNTH_SEED=7`.
#[derive(Debug, Parser)]
#[command(name = "bugsynth", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Training configuration as JSON; missing fields take defaults.
    #[arg(long, global = true, env = "BUGSYNTH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "BUGSYNTH_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "BUGSYNTH_BUG_TYPE", value_parser = parse_bug_type)]
    pub bug_type: Option<BugType>,
    /// Mutants per function in static datasets (1 or 3).
    #[arg(long, global = true, env = "BUGSYNTH_MULTIPLICITY", value_parser = parse_multiplicity)]
    pub multiplicity: Option<Multiplicity>,
    #[arg(long, global = true, env = "BUGSYNTH_MODE", value_enum)]
    pub mode: Option<TrainMode>,
    /// Single-threaded execution. Every stage already runs on one thread,
    /// so this only records the request in the resolved configuration.
    #[arg(long, global = true, env = "BUGSYNTH_DETERMINISTIC")]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Detector only, on a pre-generated example set.
    Static,
    /// Classical mutator of the bug type, applied during training.
    Dynamic,
    /// Jointly trained contextual mutator.
    Contextual,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deduplicate, split, fit the tokenizer and filter by length.
    Preprocess(commands::Preprocess),
    /// Write the mutation targets of every function.
    Annotate(commands::Annotate),
    /// Generate a static example set.
    GenStatic(commands::GenStatic),
    /// Train a detector (and a contextual mutator).
    Train(commands::Train),
    /// Continue detector training on classical mutants.
    Finetune(commands::Finetune),
    /// Score a checkpoint on an example set or a paired benchmark.
    Evaluate(commands::Evaluate),
    /// Score several checkpoints on several example sets.
    CrossEval(commands::CrossEval),
    /// Mutate one function and print the replacement distribution.
    Mutate(commands::Mutate),
}

fn parse_bug_type(s: &str) -> Result<BugType, String> {
    s.parse().map_err(|e: bugsynth::Error| e.to_string())
}

fn parse_multiplicity(s: &str) -> Result<Multiplicity, String> {
    let n: u32 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    Multiplicity::try_from(n).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::Usage>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

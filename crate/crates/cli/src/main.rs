//! `lstx`: corpus generation, classifier pretraining, style-transfer
//! training, transfer and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
/// The report was written but its evaluation classifier is below the
/// quality gate.
const EXIT_ADVISORY: u8 = 4;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage error (unknown flag, bad value, unknown config key)
  2  data or format error (missing file, corrupt checkpoint, split contamination)
  3  numerical divergence during training
  4  report written, but the evaluation classifier is below the quality gate";

const PRECEDENCE: &str = "\
Training settings are resolved in three layers: the built-in values of
--preset, then the --config file, then command-line flags (--set, --seed,
--epochs, --lr, --no-cyc, --no-dis). A later layer overrides an earlier one.
Config files hold `key=value` lines; `#` starts a comment line.";

#[derive(Parser, Debug)]
#[command(name = "lstx", version, about = "Style transfer from mixed-style sentences into one target style", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: source.txt, target.txt, labels.txt and a manifest.
    GenSynth(GenSynthArgs),
    /// Train the style-discrepancy classifier on its part of the split.
    PretrainDs(ClassifierArgs),
    /// Train the evaluation classifier on its part of the split.
    TrainEvalClf(ClassifierArgs),
    /// Train a transfer model.
    #[command(after_help = PRECEDENCE)]
    Train(TrainArgs),
    /// Transfer every input line into the target style.
    Transfer(TransferArgs),
    /// Score transferred sentences with the evaluation classifier.
    #[command(after_help = PRECEDENCE)]
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_source: usize,
    #[arg(long, default_value_t = 5000)]
    n_target: usize,
    /// Source mixture weights of the target, anti and neutral styles.
    #[arg(long, default_value = "0.3,0.7,0")]
    mix: String,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Source-domain sentences, one per line.
    #[arg(long)]
    source: PathBuf,
    /// Target-domain sentences, one per line.
    #[arg(long)]
    target: PathBuf,
    /// Style tag (A, B or N) of every source line. Without it classifiers
    /// learn source-versus-target labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Seed of the three-way split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Explicit split, one `part:role` or `-` per source then target line;
    /// replaces the seeded split.
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// Small networks for single-core runs.
    Desk,
    /// Published network sizes.
    Paper,
}

#[derive(Args, Debug)]
struct ClassifierArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write; the vocabulary and manifest go beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Padded sentence length; must match the transfer model's max_len.
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Desk-scale networks with the published optimization settings.
    Default,
    /// Desk-scale networks with a learning rate and dropout for short runs.
    Desk,
    /// Published network sizes and settings.
    Paper,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// File of `key=value` training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; model, dropout and shuffling seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Drop the cycle-consistency term.
    #[arg(long)]
    no_cyc: bool,
    /// Drop the style-discrepancy term.
    #[arg(long)]
    no_dis: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Style-discrepancy classifier checkpoint.
    #[arg(long)]
    ds: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write (best validation objective).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Evaluation classifier for the per-epoch val_acc column.
    #[arg(long)]
    eval_clf: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Transfer-model checkpoint to score (without --retrain).
    #[arg(long, required_unless_present = "retrain", conflicts_with = "retrain")]
    model: Option<PathBuf>,
    #[arg(long)]
    eval_clf: PathBuf,
    /// Source sentences to transfer and score (without --retrain).
    #[arg(long, required_unless_present = "retrain", conflicts_with = "retrain")]
    input: Option<PathBuf>,
    /// Style tags of the --input lines, for the per-style breakdown.
    #[arg(long, requires = "input")]
    input_labels: Option<PathBuf>,
    /// Number of runs; more than one needs --retrain.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    report: PathBuf,
    /// TSV of source and transferred sentences from the first run.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Train a fresh model per run (seeds seed, seed+1, ...) on the split
    /// and score its transfer-test sentences.
    #[arg(long, requires_all = ["source", "target", "ds"])]
    retrain: bool,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Style-discrepancy classifier checkpoint (with --retrain).
    #[arg(long)]
    ds: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn exit_code(e: &lstx::Error) -> u8 {
    use lstx::Error::*;
    match e {
        Spec(_) => EXIT_USAGE,
        Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Advisory) => ExitCode::from(EXIT_ADVISORY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

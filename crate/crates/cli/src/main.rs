mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmer::ModelMode;

/// Train and evaluate the two-stream audio/text emotion classifier.
#[derive(Parser, Debug)]
#[command(name = "cmer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic CMAF dataset.
    GenData(GenDataArgs),
    /// Train a model, on one held-out session or leave-one-session-out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a CMAF dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter group on the tiny config.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output CMAF file.
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances [default: synthetic.samples from --config, else 100]
    #[arg(long)]
    samples: Option<usize>,
    /// Standard deviation of the additive Gaussian noise [default: synthetic.noise, else 0.2]
    #[arg(long)]
    noise: Option<f64>,
    /// Master seed [default: synthetic.seed, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// TOML run config whose [synthetic] section supplies the generator
    /// settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("protocol").required(true).args(["loso", "test_session"]))]
struct TrainArgs {
    /// CMAF training data.
    #[arg(long)]
    data: PathBuf,
    /// TOML run config with [model], [train] and [scheduler] sections.
    /// Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides model.mode from the config.
    #[arg(long)]
    mode: Option<ModelMode>,
    /// Keep the audio encoder and text projection fixed.
    #[arg(long)]
    freeze_encoders: bool,
    /// Leave-one-session-out over sessions 1 to 5.
    #[arg(long)]
    loso: bool,
    /// Test on this session and train on the other four.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    test_session: Option<u8>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Folds trained in parallel with --loso.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Run directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CMAF data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on this session only; all samples otherwise.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    test_session: Option<u8>,
    /// Report file [default: the checkpoint path with extension .report.json]
    #[arg(long)]
    report: Option<PathBuf>,
    /// Batch size for evaluation.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the model weights and the check inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or input files.
    Validation(String),
    /// Training or I/O failure.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

//! `aend`: corpus generation, training, inference, scoring and ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod ablate;
mod datagen;
mod infer;
mod options;
mod score;
mod train;

#[derive(Parser)]
#[command(name = "aend", version, about = "Attractor-based end-to-end neural speaker diarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` / `corpus_seed` from the config
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/valid/test corpus
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Corpus directory to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant
    Train(train::TrainArgs),
    /// Diarize a corpus split or feature/audio files into RTTM
    Infer(infer::InferArgs),
    /// Score hypothesis RTTM against reference labels or RTTM
    Score(score::ScoreArgs),
    /// Train and evaluate variants 1-7 under one config
    Ablate(ablate::AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { common, out } => datagen::run(&common, &out),
        Command::Train(a) => train::run(&a),
        Command::Infer(a) => infer::run(&a),
        Command::Score(a) => score::run(&a),
        Command::Ablate(a) => ablate::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

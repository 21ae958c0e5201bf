use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use aend::trainer;

use crate::{options, Common};

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory with train/ and valid/ splits
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    pub out: PathBuf,
    /// Model variant, 1-7
    #[arg(long)]
    pub variant: Option<u32>,
    /// Total number of epochs (a resumed run stops at the same total)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint to resume from
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn run(a: &TrainArgs) -> Result<()> {
    options::require_dir(&a.corpus, "corpus")?;
    let (mut cfg, _) = options::load(&a.common)?;
    options::override_train(&mut cfg, a.variant, a.epochs)?;
    std::fs::create_dir_all(&a.out)?;
    options::write(&a.out.join("train.conf"), &aend::config::render(&[&cfg]))?;
    let outcome = trainer::train(&a.corpus, &cfg, &a.out, a.resume.as_deref())?;
    println!(
        "variant {} trained for {} steps in {:.1}s; best epoch {} (valid loss {:.4})",
        cfg.model.variant, outcome.steps, outcome.seconds, outcome.best_epoch, outcome.best_valid_loss
    );
    println!("best:  {}", outcome.best_path.display());
    println!("final: {}", outcome.final_path.display());
    Ok(())
}

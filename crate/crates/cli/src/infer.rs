//! Diarization of a corpus split or of loose feature / audio files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};
use serde::Serialize;

use aend::checkpoint;
use aend::datagen::{read_features, Split};
use aend::features::{self, FrameStack, MelSpec};
use aend::inference::{self, binarize, diarize};
use aend::model::Model;
use aend::rttm;
use aend::Tensor;

/// Sample rate assumed for headerless `.raw` audio.
const RAW_SAMPLE_RATE: u32 = 8000;

#[derive(Args)]
pub struct InferArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus split directory (with manifest.jsonl)
    #[arg(long, conflicts_with = "inputs")]
    pub corpus: Option<PathBuf>,
    /// Feature files (`.feat`) or audio (`.wav`, `.raw`); the file stem is the recording id
    pub inputs: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Median filter length in frames (odd)
    #[arg(long, default_value_t = 11)]
    pub median_window: usize,
    /// Also write per-layer posteriors and RTTM under `layer<l>/`
    #[arg(long)]
    pub per_layer: bool,
    /// Keep intermediate speaker heads instead of pruning them
    #[arg(long)]
    pub no_prune: bool,
}

#[derive(Serialize)]
struct Metadata<'a> {
    checkpoint: &'a Path,
    variant: u32,
    pruned: bool,
    threshold: f64,
    median_window: usize,
    existence_threshold: f64,
    shuffle_seed: u64,
    recordings: Vec<&'a str>,
}

fn load_file(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    Ok(match ext {
        "wav" | "raw" => {
            let (rate, wave) = features::read_audio(path, RAW_SAMPLE_RATE)?;
            features::extract(&wave, &MelSpec::for_rate(rate), FrameStack::default())?
        }
        _ => read_features(path)?,
    })
}

fn recordings(a: &InferArgs) -> Result<Vec<(String, Tensor)>> {
    if let Some(dir) = &a.corpus {
        let split = Split::open(dir)?;
        return split
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), split.features(r)?)))
            .collect();
    }
    a.inputs
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .with_context(|| format!("cannot take a recording id from {}", p.display()))?;
            Ok((id.to_string(), load_file(p)?))
        })
        .collect()
}

pub fn run(a: &InferArgs) -> Result<()> {
    if a.corpus.is_none() && a.inputs.is_empty() {
        bail!("nothing to diarize: pass --corpus or input files");
    }
    let model = Model::load(&a.checkpoint, None)?;
    let (model, pruned) = if a.no_prune {
        (model, false)
    } else {
        inference::prune_for_inference(&model)?
    };
    if a.per_layer && !model.has_intermediate_predictions() {
        bail!(
            "variant {} has no intermediate speaker predictions{}",
            model.variant(),
            if model.cfg.pruned { "; rerun with --no-prune" } else { "" }
        );
    }
    let recs = recordings(a)?;
    if recs.is_empty() {
        warn!("no recordings to diarize");
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (id, feats) in &recs {
        let d = diarize(&model, feats, a.per_layer)?;
        let act = binarize(&d.posteriors, a.threshold, a.median_window)?;
        crate::options::write(&a.out.join(format!("{id}.rttm")), &rttm::to_rttm(&act, id))?;
        for (layer, post) in &d.per_layer {
            let dir = a.out.join(format!("layer{layer}"));
            std::fs::create_dir_all(&dir)?;
            checkpoint::save(&dir.join(format!("{id}.post")), &[("posteriors".to_string(), post.clone())])?;
            let act = binarize(post, a.threshold, a.median_window)?;
            crate::options::write(&dir.join(format!("{id}.rttm")), &rttm::to_rttm(&act, id))?;
        }
        info!("{id}: {} frames, {} speakers", feats.rows(), d.posteriors.rows());
    }
    let meta = Metadata {
        checkpoint: &a.checkpoint,
        variant: model.variant(),
        pruned,
        threshold: a.threshold,
        median_window: a.median_window,
        existence_threshold: inference::EXISTENCE_THRESHOLD,
        shuffle_seed: inference::INFERENCE_SHUFFLE_SEED,
        recordings: recs.iter().map(|(id, _)| id.as_str()).collect(),
    };
    crate::options::write(&a.out.join("infer.json"), &serde_json::to_string_pretty(&meta)?)?;
    println!("{} recordings diarized into {}", recs.len(), a.out.display());
    Ok(())
}

//! Trains every variant under one config and compares them on the test
//! split. Finished variants are cached in `<out>/variant<v>/result.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};

use aend::config;
use aend::metrics::{self, DiarizationScore};
use aend::model::{variant_name, Model, VARIANTS};
use aend::trainer::{self, load_split, TrainConfig, FINAL_CHECKPOINT};

use crate::{options, Common};

const RESULT_FILE: &str = "result.json";

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory with train/valid/test splits
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; one `variant<v>/` subdirectory per variant
    #[arg(long)]
    pub out: PathBuf,
    /// Total epochs per variant
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Posterior threshold for test scoring (default: from the config)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Median filter length for test scoring (default: from the config)
    #[arg(long)]
    pub median_window: Option<usize>,
    /// Subset of variants to run (default: all)
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VariantResult {
    variant: u32,
    name: String,
    params: usize,
    config: String,
    score: DiarizationScore,
}

fn cached(dir: &Path, config: &str) -> Option<VariantResult> {
    let text = std::fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
    let r: VariantResult = serde_json::from_str(&text).ok()?;
    (r.config == config).then_some(r)
}

fn run_variant(a: &AblateArgs, cfg: &TrainConfig, dir: &Path) -> Result<VariantResult> {
    let rendered = config::render(&[cfg]);
    if let Some(r) = cached(dir, &rendered) {
        info!("variant {}: cached result", cfg.model.variant);
        return Ok(r);
    }
    // An interrupted run with the same config picks up from its last epoch.
    let final_path = dir.join(FINAL_CHECKPOINT);
    let same_config = std::fs::read_to_string(dir.join("train.conf")).is_ok_and(|c| c == rendered);
    let resume = (same_config && final_path.is_file()).then_some(final_path.as_path());
    std::fs::create_dir_all(dir)?;
    options::write(&dir.join("train.conf"), &rendered)?;
    let outcome = trainer::train(&a.corpus, cfg, dir, resume)?;
    let model = Model::load(&outcome.best_path, Some(cfg.model.variant))?;
    let test = load_split(&a.corpus.join("test"))?;
    let (_, counts) = trainer::evaluate(&model, &test, cfg)?;
    let result = VariantResult {
        variant: cfg.model.variant,
        name: variant_name(cfg.model.variant).to_string(),
        params: model.num_params(),
        config: rendered,
        score: counts.score(),
    };
    options::write(&dir.join(RESULT_FILE), &serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

fn table(results: &[VariantResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>3}  {:<width$}  {:>10}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "#", "System", "Params", "DER", "MS", "FA", "CF", "SAD MS", "SAD FA"
    );
    for r in results {
        let s = &r.score;
        let _ = writeln!(
            out,
            "{:>3}  {:<width$}  {:>10}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
            r.variant, r.name, r.params, s.der, s.ms, s.fa, s.cf, s.sad_ms, s.sad_fa
        );
    }
    out
}

pub fn run(a: &AblateArgs) -> Result<()> {
    options::require_dir(&a.corpus, "corpus")?;
    let (mut base, _) = options::load(&a.common)?;
    options::override_train(&mut base, None, a.epochs)?;
    if let Some(t) = a.threshold {
        base.threshold = t;
    }
    if let Some(w) = a.median_window {
        base.median_window = w;
    }
    let variants = if a.variants.is_empty() { VARIANTS.to_vec() } else { a.variants.clone() };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut results = Vec::new();
    for v in variants {
        let mut cfg = base.clone();
        options::override_train(&mut cfg, Some(v), None)?;
        results.push(run_variant(a, &cfg, &a.out.join(format!("variant{v}")))?);
    }
    let report = table(&results);
    print!("{report}");
    options::write(&a.out.join("ablation.txt"), &report)?;
    let rows: Vec<(String, DiarizationScore)> = results.iter().map(|r| (format!("{}", r.variant), r.score.clone())).collect();
    options::write(&a.out.join("ablation.jsonl"), &metrics::report_jsonl(&rows))?;
    Ok(())
}

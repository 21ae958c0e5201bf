//! Frame-level scoring of RTTM hypotheses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::warn;

use aend::datagen::Split;
use aend::metrics::{self, DiarizationScore, ErrorCounts};
use aend::rttm::{self, Segment, FRAME_SECONDS};
use aend::Tensor;

#[derive(Args)]
pub struct ScoreArgs {
    /// Reference: a corpus split directory, an RTTM file, or a directory of RTTM files
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Hypothesis: an RTTM file or a directory of RTTM files
    #[arg(long)]
    pub hyp: PathBuf,
    /// Score every `layer<l>/` subdirectory of the hypothesis directory
    #[arg(long)]
    pub per_layer: bool,
    /// No-score collar in seconds on each side of reference boundaries
    /// [default: 0 for label references, 0.25 for RTTM references]
    #[arg(long)]
    pub collar: Option<f64>,
    /// Row label for the report
    #[arg(long, default_value = "hyp")]
    pub label: String,
    /// Also write line-delimited JSON records here
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
}

/// Reference activity per recording id.
type References = BTreeMap<String, Tensor>;

fn rttm_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rttm"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_segments(path: &Path) -> Result<BTreeMap<String, Vec<Segment>>> {
    let mut all = Vec::new();
    for f in rttm_files(path)? {
        all.extend(rttm::read(&f)?);
    }
    Ok(rttm::by_recording(all))
}

fn references(path: &Path) -> Result<(References, bool)> {
    if path.join("manifest.jsonl").is_file() {
        let split = Split::open(path)?;
        let refs = split
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), split.labels(r)?)))
            .collect::<Result<_>>()?;
        return Ok((refs, false));
    }
    if !path.exists() {
        bail!("reference `{}` does not exist", path.display());
    }
    let refs = read_segments(path)?
        .into_iter()
        .map(|(id, segs)| (id, rttm::to_activity(&segs, FRAME_SECONDS, 0, 0).1))
        .collect();
    Ok((refs, true))
}

fn score_against(refs: &References, hyp: &Path, collar: f64) -> Result<DiarizationScore> {
    let mut hyps = read_segments(hyp)?;
    let mut total = ErrorCounts::default();
    for (id, reference) in refs {
        let segs = hyps.remove(id).unwrap_or_default();
        let (_, h) = rttm::to_activity(&segs, FRAME_SECONDS, 0, 0);
        let frames = reference.cols().max(h.cols());
        let (r, h) = (metrics::pad_frames(reference, frames), metrics::pad_frames(&h, frames));
        let mask = (collar > 0.0).then(|| metrics::collar_mask(&r, FRAME_SECONDS, collar));
        total += metrics::der_counts_masked(&r, &h, mask.as_deref())?;
    }
    for id in hyps.keys() {
        warn!("{}: hypothesis for `{id}` has no reference and is ignored", hyp.display());
    }
    Ok(total.score())
}

/// `layer<l>` subdirectories sorted by `l`.
fn layer_dirs(hyp: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut dirs: Vec<(usize, PathBuf)> = std::fs::read_dir(hyp)
        .with_context(|| format!("reading {}", hyp.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let l = p.file_name()?.to_str()?.strip_prefix("layer")?.parse().ok()?;
            Some((l, p))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn run(a: &ScoreArgs) -> Result<()> {
    let (refs, from_rttm) = references(&a.reference)?;
    let collar = a.collar.unwrap_or(if from_rttm { metrics::DEFAULT_COLLAR_SECONDS } else { 0.0 });
    if collar < 0.0 {
        bail!("collar must be non-negative, got {collar}");
    }
    if !a.hyp.exists() {
        bail!("hypothesis `{}` does not exist", a.hyp.display());
    }
    let (title, rows) = if a.per_layer {
        let dirs = layer_dirs(&a.hyp)?;
        if dirs.is_empty() {
            bail!("no layer<l> directories under {}", a.hyp.display());
        }
        let last = dirs.len() - 1;
        let rows = dirs
            .iter()
            .enumerate()
            .map(|(i, (l, dir))| {
                let label = if i == last { "Last".to_string() } else { l.to_string() };
                Ok((label, score_against(&refs, dir, collar)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ("Layer", rows)
    } else {
        ("System", vec![(a.label.clone(), score_against(&refs, &a.hyp, collar)?)])
    };
    print!("{}", metrics::report_table_titled(title, &rows));
    if let Some(path) = &a.jsonl {
        crate::options::write(path, &metrics::report_jsonl(&rows))?;
    }
    Ok(())
}

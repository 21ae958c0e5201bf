//! RTTM segment files and frame-level activity conversion.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_SECONDS: f64 = 0.1;

/// One contiguous active run of a speaker, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub recording: String,
    pub speaker: String,
    pub onset: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

pub fn speaker_name(k: usize) -> String {
    format!("spk{k}")
}

/// Contiguous runs of an `S × T` activity matrix, grouped by speaker row
/// and sorted by onset.
pub fn segments(activity: &Tensor, recording: &str, frame_seconds: f64) -> Vec<Segment> {
    let (s, t) = activity.dims2();
    let mut out = Vec::new();
    for k in 0..s {
        let row = activity.row(k);
        let mut start = None;
        for i in 0..=t {
            let on = i < t && row[i] != 0.0;
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(b)) => {
                    out.push(Segment {
                        recording: recording.to_string(),
                        speaker: speaker_name(k),
                        onset: b as f64 * frame_seconds,
                        duration: (i - b) as f64 * frame_seconds,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

pub fn format_segments(segs: &[Segment]) -> String {
    segs.iter()
        .map(|s| {
            format!(
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>\n",
                s.recording, s.onset, s.duration, s.speaker
            )
        })
        .collect()
}

pub fn to_rttm(activity: &Tensor, recording: &str) -> String {
    format_segments(&segments(activity, recording, FRAME_SECONDS))
}

/// Parses `SPEAKER` lines; other record types and blank lines are skipped.
pub fn parse(text: &str, path: &Path) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0] != "SPEAKER" {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if f.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| err(format!("bad {what} `{s}`")));
        let onset = num(f[3], "onset")?;
        let duration = num(f[4], "duration")?;
        if onset < 0.0 || duration < 0.0 {
            return Err(err("negative onset or duration".into()));
        }
        out.push(Segment {
            recording: f[1].to_string(),
            speaker: f[7].to_string(),
            onset,
            duration,
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Segment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Groups segments by recording id, keeping file order.
pub fn by_recording(segs: Vec<Segment>) -> BTreeMap<String, Vec<Segment>> {
    let mut map: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for s in segs {
        map.entry(s.recording.clone()).or_default().push(s);
    }
    map
}

fn speaker_order(name: &str) -> (Option<usize>, &str) {
    (name.strip_prefix("spk").and_then(|n| n.parse().ok()), name)
}

/// Rasterises segments onto a frame grid. Rows follow `spk{k}` numbering
/// when every name has that form (so `spk2` alone still yields three
/// rows), otherwise sorted names. At least `min_speakers` rows and
/// `min_frames` columns are produced.
pub fn to_activity(segs: &[Segment], frame_seconds: f64, min_speakers: usize, min_frames: usize) -> (Vec<String>, Tensor) {
    let mut names: Vec<&str> = segs.iter().map(|s| s.speaker.as_str()).collect();
    names.sort_by(|a, b| speaker_order(a).cmp(&speaker_order(b)));
    names.dedup();
    let numbered: Option<Vec<usize>> = names.iter().map(|n| speaker_order(n).0).collect();
    let names: Vec<String> = match numbered {
        Some(ks) => {
            let rows = ks.iter().max().map_or(0, |m| m + 1).max(min_speakers);
            (0..rows).map(speaker_name).collect()
        }
        None => {
            let mut v: Vec<String> = names.iter().map(|s| s.to_string()).collect();
            while v.len() < min_speakers {
                v.push(format!("<extra{}>", v.len()));
            }
            v
        }
    };
    let to_frame = |x: f64| (x / frame_seconds).round() as usize;
    let frames = segs.iter().map(|s| to_frame(s.end())).max().unwrap_or(0).max(min_frames);
    let mut act = Tensor::zeros(&[names.len(), frames]);
    for s in segs {
        let row = names.iter().position(|n| *n == s.speaker).expect("name collected above");
        for t in to_frame(s.onset)..to_frame(s.end()) {
            act.set(row, t, 1.0);
        }
    }
    (names, act)
}

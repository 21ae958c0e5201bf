//! Synthetic multi-speaker corpora.
//!
//! Speech activity follows a two-state Markov chain per speaker. Features
//! are produced either directly (each active speaker adds its voiceprint
//! vector to the frame) or from waveforms (each speaker is a bank of
//! sinusoids run through the log-mel front end).
//!
//! On disk a corpus is
//!
//! ```text
//! <root>/corpus.json          generation config
//! <root>/stats.aend           feature mean / std over the train split
//! <root>/<split>/manifest.jsonl
//! <root>/<split>/<id>.feat    T×D features, tensor "features"
//! <root>/<split>/<id>.lab     S×T bytes, 0 or 1, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{self, FrameStack, MelSpec};
use crate::model::FeatureNorm;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Recording index offset per split, keeping id ranges and seed streams
/// disjoint.
const SPLIT_STRIDE: u64 = 1_000_000;

/// SplitMix64 finaliser over `(seed, label)`.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityScript {
    /// `S × T`, entries 0 or 1.
    pub activity: Tensor,
    pub seed: u64,
}

impl ActivityScript {
    pub fn num_speakers(&self) -> usize {
        self.activity.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.activity.cols()
    }

    pub fn is_active(&self, s: usize, t: usize) -> bool {
        self.activity.at(s, t) != 0.0
    }
}

/// Independent on/off chains: `p_on` is the off→on probability, `p_off`
/// the on→off one. Each chain starts from its stationary distribution,
/// and a speaker that never turns on gets one forced active frame.
pub fn gen_activity(speakers: usize, frames: usize, p_on: f64, p_off: f64, seed: u64) -> Result<ActivityScript> {
    if speakers == 0 || frames == 0 {
        return Err(Error::InvalidArgument("need at least one speaker and one frame".into()));
    }
    if !(p_on > 0.0 && p_on <= 1.0 && (0.0..1.0).contains(&p_off)) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < p_on ≤ 1 and 0 ≤ p_off < 1, got {p_on}, {p_off}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stationary = p_on / (p_on + p_off);
    let mut act = Tensor::zeros(&[speakers, frames]);
    for s in 0..speakers {
        let mut on = rng.gen::<f64>() < stationary;
        let mut any = false;
        for t in 0..frames {
            if t > 0 {
                let flip = if on { p_off } else { p_on };
                if rng.gen::<f64>() < flip {
                    on = !on;
                }
            }
            if on {
                act.set(s, t, 1.0);
                any = true;
            }
        }
        if !any {
            act.set(s, rng.gen_range(0..frames), 1.0);
        }
    }
    Ok(ActivityScript { activity: act, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceprintModel {
    /// `S × D` per-speaker mean feature vectors.
    pub voiceprints: Tensor,
    pub noise_std: f64,
}

impl VoiceprintModel {
    /// Draws `speakers` voiceprints with i.i.d. `N(0, scale²)` entries,
    /// redrawing any vector closer than `4·noise_std` to an earlier one.
    pub fn generate<R: Rng>(
        speakers: usize,
        dim: usize,
        scale: f64,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if noise_std <= 0.0 || scale <= 0.0 {
            return Err(Error::InvalidArgument("noise_std and scale must be positive".into()));
        }
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let min_dist = 4.0 * noise_std;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(speakers);
        let mut attempts = 0;
        while rows.len() < speakers {
            attempts += 1;
            if attempts > 1000 * (speakers + 1) {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {speakers} voiceprints {min_dist} apart in {dim} dims at scale {scale}"
                )));
            }
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            if rows.iter().all(|r| dist(r, &v) > min_dist) {
                rows.push(v);
            }
        }
        Ok(Self {
            voiceprints: Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(&[0, dim])),
            noise_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.voiceprints.cols()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.voiceprints.rows();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                best = best.min(dist(self.voiceprints.row(i), self.voiceprints.row(j)));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `T × D` frames: the sum of active voiceprints plus `N(0, noise_std²)`.
pub fn gen_features<R: Rng>(script: &ActivityScript, model: &VoiceprintModel, rng: &mut R) -> Result<Tensor> {
    let (s, t) = script.activity.dims2();
    if model.voiceprints.rows() != s {
        return Err(Error::dim("gen_features", &[s, t], model.voiceprints.shape()));
    }
    let d = model.dim();
    let normal = Normal::new(0.0, model.noise_std).expect("positive noise");
    let mut out = Tensor::zeros(&[t, d]);
    for (ti, row) in out.data_mut().chunks_mut(d).enumerate() {
        for k in 0..s {
            if script.is_active(k, ti) {
                row.iter_mut().zip(model.voiceprints.row(k)).for_each(|(r, v)| *r += v);
            }
        }
        row.iter_mut().for_each(|r| *r += normal.sample(rng));
    }
    Ok(out)
}

/// Adds a temporally smooth AR(1) noise process whose power sits `snr_db`
/// below the mean power of the speech frames.
pub fn add_background<R: Rng>(features: &mut Tensor, script: &ActivityScript, snr_db: f64, rng: &mut R) {
    let (t, d) = features.dims2();
    let mut speech_power = 0.0;
    let mut speech_frames = 0usize;
    for ti in 0..t {
        if (0..script.num_speakers()).any(|s| script.is_active(s, ti)) {
            speech_power += features.row(ti).iter().map(|v| v * v).sum::<f64>() / d as f64;
            speech_frames += 1;
        }
    }
    if speech_frames == 0 {
        return;
    }
    let amp = (speech_power / speech_frames as f64 / 10f64.powf(snr_db / 10.0)).sqrt();
    let rho: f64 = 0.9;
    let innov = (1.0 - rho * rho).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut state: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    for row in features.data_mut().chunks_mut(d) {
        for (r, st) in row.iter_mut().zip(state.iter_mut()) {
            *r += amp * *st;
            *st = rho * *st + innov * normal.sample(rng);
        }
    }
}

/// Per-speaker sinusoid bank used in waveform mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneBank {
    /// `(frequency Hz, amplitude)` per partial.
    pub partials: Vec<(f64, f64)>,
}

impl ToneBank {
    pub fn random<R: Rng>(partials: usize, sample_rate: u32, rng: &mut R) -> Self {
        let hi = sample_rate as f64 * 0.45;
        Self {
            partials: (0..partials)
                .map(|_| (rng.gen_range(150.0..hi), rng.gen_range(0.05..0.2)))
                .collect(),
        }
    }
}

/// Waveform whose stacked log-mel features have exactly
/// `script.num_frames()` frames. Speaker `s` sounds during the
/// `[t·hop, (t+1)·hop)` samples of every active label frame `t`.
pub fn gen_waveform<R: Rng>(
    script: &ActivityScript,
    banks: &[ToneBank],
    spec: &MelSpec,
    stack: FrameStack,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if banks.len() != script.num_speakers() {
        return Err(Error::InvalidArgument(format!(
            "{} tone banks for {} speakers",
            banks.len(),
            script.num_speakers()
        )));
    }
    let t = script.num_frames();
    let mel_frames = (t - 1) * stack.hop + stack.context;
    let samples = (mel_frames - 1) * spec.hop_samples() + spec.frame_len();
    let label_hop = stack.hop * spec.hop_samples();
    let rate = spec.sample_rate as f64;
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("non-negative noise");
    let mut wave = vec![0.0; samples];
    for (s, bank) in banks.iter().enumerate() {
        let phases: Vec<f64> = bank.partials.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        for (i, w) in wave.iter_mut().enumerate() {
            let frame = (i / label_hop).min(t - 1);
            if script.is_active(s, frame) {
                *w += bank
                    .partials
                    .iter()
                    .zip(&phases)
                    .map(|((f, a), p)| a * (std::f64::consts::TAU * f * i as f64 / rate + p).sin())
                    .sum::<f64>();
            }
        }
    }
    if noise_std > 0.0 {
        wave.iter_mut().for_each(|w| *w += normal.sample(rng));
    }
    Ok(wave)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisLevel {
    Feature,
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Recordings per speaker count 1..=4, for each split.
    pub train_counts: [usize; 4],
    pub valid_counts: [usize; 4],
    pub test_counts: [usize; 4],
    pub min_frames: usize,
    pub max_frames: usize,
    pub p_on: f64,
    pub p_off: f64,
    pub feature_dim: usize,
    pub voiceprint_scale: f64,
    pub noise_std: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Size of the shared speaker pool; 0 draws fresh speakers for every
    /// recording.
    pub speaker_pool: usize,
    pub level: SynthesisLevel,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_counts: [20, 20, 20, 0],
            valid_counts: [4, 3, 3, 0],
            test_counts: [4, 3, 3, 0],
            min_frames: 500,
            max_frames: 500,
            p_on: 0.01,
            p_off: 0.02,
            feature_dim: 345,
            voiceprint_scale: 1.0,
            noise_std: 1.0,
            snr_db_min: 5.0,
            snr_db_max: 20.0,
            speaker_pool: 6,
            level: SynthesisLevel::Feature,
        }
    }
}

impl CorpusConfig {
    pub fn counts(&self, split: &str) -> [usize; 4] {
        match split {
            "train" => self.train_counts,
            "valid" => self.valid_counts,
            _ => self.test_counts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidArgument("need 1 ≤ min_frames ≤ max_frames".into()));
        }
        if self.snr_db_min > self.snr_db_max {
            return Err(Error::InvalidArgument("snr_db_min exceeds snr_db_max".into()));
        }
        if self.speaker_pool > 0 && self.speaker_pool < 4 && [self.train_counts, self.valid_counts, self.test_counts].iter().any(|c| c[self.speaker_pool..].iter().any(|&n| n > 0)) {
            return Err(Error::InvalidArgument("speaker pool smaller than the largest speaker count".into()));
        }
        if self.level == SynthesisLevel::Waveform && self.feature_dim != 345 {
            return Err(Error::InvalidArgument("waveform synthesis yields 345-dim features".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub features: String,
    pub labels: String,
    #[serde(rename = "S")]
    pub speakers: usize,
    #[serde(rename = "T")]
    pub frames: usize,
}

/// A synthesized recording before it is written out.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub features: Tensor,
    pub script: ActivityScript,
}

pub fn recording_id(split: &str, index: usize) -> String {
    let base = SPLITS.iter().position(|s| *s == split).unwrap_or(0) as u64 * SPLIT_STRIDE;
    format!("rec{:07}", base + index as u64)
}

fn recording_label(id: &str) -> u64 {
    id.trim_start_matches("rec").parse().unwrap_or(0)
}

fn speaker_pool(cfg: &CorpusConfig) -> Result<Option<VoiceprintModel>> {
    if cfg.speaker_pool == 0 || cfg.level == SynthesisLevel::Waveform {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    VoiceprintModel::generate(cfg.speaker_pool, cfg.feature_dim, cfg.voiceprint_scale, cfg.noise_std, &mut rng).map(Some)
}

/// Synthesizes one recording from its own RNG stream.
pub fn gen_recording(cfg: &CorpusConfig, id: &str, speakers: usize, pool: Option<&VoiceprintModel>) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, recording_label(id)));
    let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
    let script = gen_activity(speakers, frames, cfg.p_on, cfg.p_off, rng.gen())?;
    let mut feats = match cfg.level {
        SynthesisLevel::Feature => {
            let model = match pool {
                Some(p) => {
                    let chosen = rand::seq::index::sample(&mut rng, p.voiceprints.rows(), speakers).into_vec();
                    VoiceprintModel {
                        voiceprints: p.voiceprints.select_rows(&chosen),
                        noise_std: p.noise_std,
                    }
                }
                None => VoiceprintModel::generate(speakers, cfg.feature_dim, cfg.voiceprint_scale, cfg.noise_std, &mut rng)?,
            };
            gen_features(&script, &model, &mut rng)?
        }
        SynthesisLevel::Waveform => {
            let spec = MelSpec::default();
            let stack = FrameStack::default();
            let banks: Vec<ToneBank> = (0..speakers).map(|_| ToneBank::random(3, spec.sample_rate, &mut rng)).collect();
            let wave = gen_waveform(&script, &banks, &spec, stack, cfg.noise_std * 1e-3, &mut rng)?;
            features::extract(&wave, &spec, stack)?
        }
    };
    let snr = if cfg.snr_db_max > cfg.snr_db_min {
        rng.gen_range(cfg.snr_db_min..cfg.snr_db_max)
    } else {
        cfg.snr_db_min
    };
    if cfg.level == SynthesisLevel::Feature {
        add_background(&mut feats, &script, snr, &mut rng);
    }
    checkpoint::round_to_f32(&mut feats);
    Ok(Recording {
        id: id.to_string(),
        features: feats,
        script,
    })
}

pub fn write_labels(path: &Path, activity: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = activity.data().iter().map(|&v| (v != 0.0) as u8).collect();
    checkpoint::write_atomic(path, &bytes)
}

pub fn read_labels(path: &Path, speakers: usize, frames: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != speakers * frames {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {speakers}×{frames}",
            path.display(),
            bytes.len()
        )));
    }
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::Format(format!("{}: label byte {b} is not 0 or 1", path.display())));
    }
    Tensor::new(vec![speakers, frames], bytes.into_iter().map(f64::from).collect())
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    checkpoint::save(path, &[("features".to_string(), features.clone())])
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    checkpoint::load(path)?
        .into_iter()
        .find(|(n, _)| n == "features")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("{}: no `features` tensor", path.display())))
}

/// Per-dimension mean and standard deviation; zero deviations become 1.
pub fn feature_stats<'a>(feats: impl IntoIterator<Item = &'a Tensor>) -> Option<FeatureNorm> {
    let mut n = 0usize;
    let mut sum: Vec<f64> = vec![];
    let mut sq: Vec<f64> = vec![];
    for f in feats {
        let d = f.cols();
        if sum.is_empty() {
            sum = vec![0.0; d];
            sq = vec![0.0; d];
        }
        for row in f.data().chunks(d) {
            for j in 0..d {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n as f64 - m * m).max(0.0);
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    Some(FeatureNorm { mean, std })
}

pub fn write_stats(path: &Path, norm: &FeatureNorm) -> Result<()> {
    checkpoint::save(
        path,
        &[
            ("mean".to_string(), Tensor::vector(norm.mean.clone())),
            ("std".to_string(), Tensor::vector(norm.std.clone())),
        ],
    )
}

pub fn read_stats(path: &Path) -> Result<FeatureNorm> {
    let t = checkpoint::load(path)?;
    let get = |name: &str| {
        t.iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.data().to_vec())
            .ok_or_else(|| Error::Format(format!("{}: missing `{name}`", path.display())))
    };
    Ok(FeatureNorm {
        mean: get("mean")?,
        std: get("std")?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    /// `(split, recordings, [count per S=1..4])`.
    pub splits: Vec<(String, usize, [usize; 4])>,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (split, n, by_s) in &self.splits {
            writeln!(f, "{split:<6} {n:>5} recordings  S=1:{} S=2:{} S=3:{} S=4:{}", by_s[0], by_s[1], by_s[2], by_s[3])?;
        }
        Ok(())
    }
}

/// Writes a full corpus under `root`. The parent of `root` must exist.
pub fn gen_corpus(cfg: &CorpusConfig, root: &Path) -> Result<CorpusSummary> {
    cfg.validate()?;
    if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output parent directory does not exist"),
            ));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pool = speaker_pool(cfg)?;
    let mut summary = CorpusSummary::default();
    let mut train_feats = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let counts = cfg.counts(split);
        let mut manifest = String::new();
        let mut index = 0;
        for (si, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let id = recording_id(split, index);
                index += 1;
                let rec = gen_recording(cfg, &id, si + 1, pool.as_ref())?;
                let record = Record {
                    id: id.clone(),
                    features: format!("{id}.feat"),
                    labels: format!("{id}.lab"),
                    speakers: si + 1,
                    frames: rec.script.num_frames(),
                };
                write_features(&dir.join(&record.features), &rec.features)?;
                write_labels(&dir.join(&record.labels), &rec.script.activity)?;
                manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
                manifest.push('\n');
                if split == "train" {
                    train_feats.push(rec.features);
                }
            }
        }
        checkpoint::write_atomic(&dir.join("manifest.jsonl"), manifest.as_bytes())?;
        summary.splits.push((split.to_string(), index, counts));
    }
    if let Some(norm) = feature_stats(&train_feats) {
        write_stats(&root.join("stats.aend"), &norm)?;
    }
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    checkpoint::write_atomic(&root.join("corpus.json"), json.as_bytes())?;
    Ok(summary)
}

/// A split directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Split {
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

impl Split {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn features(&self, r: &Record) -> Result<Tensor> {
        let f = read_features(&self.dir.join(&r.features))?;
        if f.rows() != r.frames {
            return Err(Error::Format(format!("{}: {} frames, manifest says {}", r.features, f.rows(), r.frames)));
        }
        Ok(f)
    }

    pub fn labels(&self, r: &Record) -> Result<Tensor> {
        read_labels(&self.dir.join(&r.labels), r.speakers, r.frames)
    }

    pub fn max_speakers(&self) -> usize {
        self.records.iter().map(|r| r.speakers).max().unwrap_or(0)
    }

    /// Overlapped over speech frames, recomputed from the label files.
    pub fn overlap_ratio(&self) -> Result<f64> {
        let labels = self.records.iter().map(|r| self.labels(r)).collect::<Result<Vec<_>>>()?;
        Ok(overlap_ratio(&labels))
    }
}

/// Frames with two or more active speakers over frames with at least one.
pub fn overlap_ratio(labels: &[Tensor]) -> f64 {
    let (mut speech, mut overlap) = (0usize, 0usize);
    for l in labels {
        let (s, t) = l.dims2();
        for ti in 0..t {
            let n = (0..s).filter(|&k| l.at(k, ti) != 0.0).count();
            speech += (n >= 1) as usize;
            overlap += (n >= 2) as usize;
        }
    }
    if speech == 0 {
        0.0
    } else {
        overlap as f64 / speech as f64
    }
}

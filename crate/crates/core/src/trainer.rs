//! Training loop, validation and checkpointing.
//!
//! Each recording in a batch gets its own graph, so recordings with
//! different speaker counts or lengths share a batch without padding. The
//! batch gradient is the mean of the per-recording gradients.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractors::SpeakerAttractorSet;
use crate::checkpoint;
use crate::datagen::{self, derive_seed, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::{binarize, diarize};
use crate::losses::{total_loss, LayerOutputs, LossWeights};
use crate::metrics::{der_counts, ErrorCounts};
use crate::model::{EdaKind, FeatureNorm, LayerPrediction, Mode, Model, ModelConfig};
use crate::optim::{adamw_step, clip_global_norm, scheduled_lr, zero_grads, AdamWConfig, AdamWState, LrSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub lr: f64,
    pub adam: AdamWConfig,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub grad_clip: f64,
    pub chunk_frames: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub loss: LossWeights,
    /// Binarisation used for the validation DER.
    pub threshold: f64,
    pub median_window: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 100,
            lr: 1e-3,
            adam: AdamWConfig::default(),
            warmup_steps: 2000,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 5.0,
            chunk_frames: 500,
            seed: 0,
            eval_every: 1,
            loss: LossWeights::default(),
            threshold: 0.5,
            median_window: 11,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_frames == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch_size, chunk_frames and eval_every must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.model.spec()?;
        self.model.encoder.validate()
    }
}

/// One recording held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub features: Tensor,
    /// `S × T` 0/1 reference activity.
    pub labels: Tensor,
}

impl Sample {
    pub fn speakers(&self) -> usize {
        self.labels.rows()
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    fn chunk(&self, start: usize, len: usize) -> Result<Sample> {
        let idx: Vec<usize> = (start..start + len).collect();
        let labels = self.labels.transpose().select_rows(&idx).transpose();
        Ok(Sample {
            id: self.id.clone(),
            features: self.features.select_rows(&idx),
            labels,
        })
    }
}

pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let split = Split::open(dir)?;
    split
        .records
        .iter()
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                features: split.features(r)?,
                labels: split.labels(r)?,
            })
        })
        .collect()
}

/// Feature statistics from `stats.aend` under the corpus root, or computed
/// from `train` when the file is absent.
pub fn corpus_norm(root: &Path, train: &[Sample]) -> Result<Option<FeatureNorm>> {
    let p = root.join("stats.aend");
    if p.exists() {
        return datagen::read_stats(&p).map(Some);
    }
    Ok(datagen::feature_stats(train.iter().map(|s| &s.features)))
}

/// Rejects corpora the model cannot represent.
pub fn check_capacity(cfg: &ModelConfig, max_speakers: usize) -> Result<()> {
    let spec = cfg.spec()?;
    if spec.eda == EdaKind::Attribute && cfg.attribute_count <= max_speakers {
        return Err(Error::InvalidArgument(format!(
            "attribute_count {} must exceed the largest speaker count {max_speakers}",
            cfg.attribute_count
        )));
    }
    if spec.eda != EdaKind::Lstm && max_speakers + 1 > cfg.max_attractors {
        return Err(Error::InvalidArgument(format!(
            "max_attractors {} leaves no stop slot for {max_speakers} speakers",
            cfg.max_attractors
        )));
    }
    Ok(())
}

fn layer_outputs(p: &LayerPrediction) -> Option<LayerOutputs> {
    match (p.posteriors, p.attractors) {
        (Some(posteriors), Some(SpeakerAttractorSet { existence_logits, .. })) => Some(LayerOutputs {
            posteriors,
            existence_logits,
        }),
        _ => None,
    }
}

/// Builds the graph for one recording and returns it with the loss node.
pub fn sample_loss(
    model: &Model,
    g: &mut Graph,
    sample: &Sample,
    shuffle_seed: u64,
    weights: LossWeights,
) -> Result<(crate::graph::Var, f64)> {
    let out = model.forward(
        g,
        &sample.features,
        Mode::Train {
            speakers: sample.speakers(),
            shuffle_seed,
        },
    )?;
    let last = layer_outputs(&out.last).expect("final layer always predicts speakers");
    let inter: Vec<LayerOutputs> = out.intermediate.iter().filter_map(layer_outputs).collect();
    let (loss, breakdown) = total_loss(g, last, &inter, &sample.labels, weights)?;
    Ok((loss, breakdown.total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    #[serde(rename = "valid_DER")]
    pub valid_der: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub steps: u64,
    pub seconds: f64,
}

/// Mean loss and aggregated error counts over full recordings.
pub fn evaluate(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<(f64, ErrorCounts)> {
    let mut loss = 0.0;
    let mut counts = ErrorCounts::default();
    for (i, s) in data.iter().enumerate() {
        let mut g = Graph::new();
        let (_, l) = sample_loss(model, &mut g, s, derive_seed(cfg.seed, 7_000_000 + i as u64), cfg.loss)?;
        loss += l;
        let d = diarize(model, &s.features, false)?;
        let hyp = binarize(&d.posteriors, cfg.threshold, cfg.median_window)?;
        counts += der_counts(&s.labels, &hyp)?;
    }
    Ok((loss / data.len().max(1) as f64, counts))
}

/// Error counts per predicting layer (`1..L`), summed over recordings.
pub fn evaluate_per_layer(model: &Model, data: &[Sample], threshold: f64, median_window: usize) -> Result<Vec<(usize, ErrorCounts)>> {
    let mut acc: Vec<(usize, ErrorCounts)> = Vec::new();
    for s in data {
        let d = diarize(model, &s.features, true)?;
        for (i, (layer, post)) in d.per_layer.iter().enumerate() {
            let hyp = binarize(post, threshold, median_window)?;
            let c = der_counts(&s.labels, &hyp)?;
            if acc.len() <= i {
                acc.push((*layer, ErrorCounts::default()));
            }
            acc[i].1 += c;
        }
    }
    Ok(acc)
}

fn training_tensors(model: &Model, state: &AdamWState, epoch: usize, best_valid: f64) -> Vec<(String, Tensor)> {
    let mut t = model.to_tensors();
    t.push(("meta.epoch".into(), Tensor::vector(vec![epoch as f64])));
    t.push(("meta.best_valid".into(), Tensor::vector(vec![best_valid])));
    t.push(("opt.step".into(), Tensor::vector(vec![state.step as f64])));
    for ((name, p), (m, v)) in model.store.iter().zip(state.m.iter().zip(&state.v)) {
        t.push((format!("opt.m.{name}"), Tensor::new(p.shape().to_vec(), m.clone()).expect("moment shape")));
        t.push((format!("opt.v.{name}"), Tensor::new(p.shape().to_vec(), v.clone()).expect("moment shape")));
    }
    t
}

/// Stored moments are `f32`; written values round-trip as such.
fn round_state(state: &mut AdamWState) {
    for x in state.m.iter_mut().chain(state.v.iter_mut()).flatten() {
        *x = *x as f32 as f64;
    }
}

pub struct Resumed {
    pub model: Model,
    pub state: AdamWState,
    pub epoch: usize,
    pub best_valid: f64,
}

pub fn load_training_state(path: &Path, expected_variant: u32) -> Result<Resumed> {
    let tensors = checkpoint::load(path)?;
    let model = Model::from_tensors(&tensors, Some(expected_variant))?;
    let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t);
    let mut state = AdamWState::new(&model.store);
    state.step = find("opt.step").map_or(0.0, |t| t.item()) as u64;
    for (i, (name, _)) in model.store.iter().enumerate() {
        if let (Some(m), Some(v)) = (find(&format!("opt.m.{name}")), find(&format!("opt.v.{name}"))) {
            state.m[i] = m.data().to_vec();
            state.v[i] = v.data().to_vec();
        }
    }
    Ok(Resumed {
        model,
        state,
        epoch: find("meta.epoch").map_or(0.0, |t| t.item()) as usize,
        best_valid: find("meta.best_valid").map_or(f64::INFINITY, |t| t.item()),
    })
}

pub const BEST_CHECKPOINT: &str = "best.aend";
pub const FINAL_CHECKPOINT: &str = "final.aend";
pub const LOG_FILE: &str = "train.log";

/// Trains on `<corpus>/train`, validating on `<corpus>/valid`, writing
/// checkpoints and the log into `out`. With `resume`, training continues
/// from that checkpoint's epoch counter.
pub fn train(corpus: &Path, cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let train = load_split(&corpus.join("train"))?;
    let valid = load_split(&corpus.join("valid"))?;
    let norm = corpus_norm(corpus, &train)?;
    train_on(&train, &valid, norm, cfg, out, resume)
}

pub fn train_on(
    train: &[Sample],
    valid: &[Sample],
    norm: Option<FeatureNorm>,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split has no recordings".into()));
    }
    let max_s = train.iter().chain(valid).map(Sample::speakers).max().unwrap_or(0);
    check_capacity(&cfg.model, max_s)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (mut model, mut state, start_epoch, mut best_valid) = match resume {
        Some(p) => {
            let r = load_training_state(p, cfg.model.variant)?;
            info!("resuming from {} at epoch {}", p.display(), r.epoch);
            (r.model, r.state, r.epoch, r.best_valid)
        }
        None => {
            let mut m = Model::new(&cfg.model, derive_seed(cfg.seed, 1))?;
            m.norm = norm;
            let s = AdamWState::new(&m.store);
            (m, s, 0, f64::INFINITY)
        }
    };
    info!(
        "variant {} with {} parameters, {} train / {} valid recordings",
        model.variant(),
        model.num_params(),
        train.len(),
        valid.len()
    );

    let best_path = out.join(BEST_CHECKPOINT);
    let final_path = out.join(FINAL_CHECKPOINT);
    let log_path = out.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Vec::new();
    let mut best_epoch = start_epoch;
    let started = Instant::now();

    for epoch in start_epoch + 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1_000_000 + epoch as u64));
        let mut order: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let len = cfg.chunk_frames.min(s.frames());
                (i, rng.gen_range(0..=s.frames() - len))
            })
            .collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = zero_grads(&model.store);
            let weight = 1.0 / batch.len() as f64;
            for &(i, start) in batch {
                let s = &train[i];
                let chunk = s.chunk(start, cfg.chunk_frames.min(s.frames()))?;
                let mut g = Graph::training(rng.gen());
                let (loss, value) = sample_loss(&model, &mut g, &chunk, rng.gen(), cfg.loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        ids: batch.iter().map(|&(j, _)| train[j].id.clone()).collect(),
                    });
                }
                epoch_loss += value;
                g.backward(loss)?.accumulate(&model.store, &mut grads, weight);
            }
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = scheduled_lr(cfg.lr_schedule, cfg.lr, cfg.warmup_steps, state.step);
            adamw_step(&mut model.store, &grads, &mut state, lr, &cfg.adam)?;
            model.round_params();
            round_state(&mut state);
            debug!("epoch {epoch} batch {b}: grad norm {norm:.4}, lr {lr:.2e}");
        }
        let train_loss = epoch_loss / train.len() as f64;

        let mut entry = EpochLog {
            epoch,
            train_loss,
            valid_loss: None,
            valid_der: None,
        };
        if !valid.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let (vl, counts) = evaluate(&model, valid, cfg)?;
            entry.valid_loss = Some(vl);
            entry.valid_der = Some(counts.score().der);
            if vl < best_valid {
                best_valid = vl;
                best_epoch = epoch;
                checkpoint::save(&best_path, &training_tensors(&model, &state, epoch, best_valid))?;
            }
        }
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        info!("{line}");
        log.push(entry);
        checkpoint::save(&final_path, &training_tensors(&model, &state, epoch, best_valid))?;
    }
    if valid.is_empty() || !best_path.exists() {
        // nothing to select on: the final model is also the best one
        checkpoint::save(&best_path, &training_tensors(&model, &state, cfg.epochs.max(start_epoch), best_valid))?;
    }
    if !final_path.exists() {
        checkpoint::save(&final_path, &training_tensors(&model, &state, start_epoch, best_valid))?;
    }
    Ok(TrainOutcome {
        final_model: model,
        best_path,
        final_path,
        log,
        best_epoch,
        best_valid_loss: best_valid,
        steps: state.step,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_activity, VoiceprintModel};

    pub(crate) fn tiny_cfg(variant: u32) -> TrainConfig {
        let mut c = TrainConfig {
            batch_size: 2,
            epochs: 1,
            warmup_steps: 10,
            chunk_frames: 40,
            ..TrainConfig::default()
        };
        c.model = ModelConfig::for_variant(variant).unwrap();
        let e = &mut c.model.encoder;
        e.input_dim = 10;
        e.layers = 2;
        e.d_model = 8;
        e.heads = 2;
        e.ff_dim = 16;
        e.conv_kernel = 3;
        c.model.attribute_count = 4;
        c.model.max_attractors = 4;
        c.model.eda_ff_dim = 16;
        c
    }

    pub(crate) fn synth(n: usize, speakers: usize, frames: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = VoiceprintModel::generate(4, 10, 1.0, 0.3, &mut rng).unwrap();
        (0..n)
            .map(|i| {
                let script = gen_activity(speakers, frames, 0.1, 0.1, seed + i as u64).unwrap();
                let vp = VoiceprintModel {
                    voiceprints: pool.voiceprints.select_rows(&(0..speakers).collect::<Vec<_>>()),
                    noise_std: 0.3,
                };
                Sample {
                    id: format!("s{i}"),
                    features: datagen::gen_features(&script, &vp, &mut rng).unwrap(),
                    labels: script.activity,
                }
            })
            .collect()
    }

    #[test]
    fn step_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth(2, 2, 30, 0);
        let cfg = TrainConfig { batch_size: 8, ..tiny_cfg(1) };
        let out = train_on(&data, &data, None, &cfg, dir.path(), None).unwrap();
        assert_eq!(out.steps, 1);
        let cfg = TrainConfig { batch_size: 1, ..tiny_cfg(1) };
        let out = train_on(&data, &[], None, &cfg, dir.path(), None).unwrap();
        assert_eq!(out.steps, 2);
        assert!(out.best_path.exists() && out.final_path.exists());
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth(3, 2, 30, 1);
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg(4) };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train_on(&data, &data[..1], None, &cfg, a.path(), None).unwrap();
        train_on(&data, &data[..1], None, &cfg, b.path(), None).unwrap();
        for f in [LOG_FILE, FINAL_CHECKPOINT] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn resume_continues_epochs_and_matches_uninterrupted_run() {
        let data = synth(3, 2, 30, 2);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = TrainConfig { epochs: 3, ..tiny_cfg(2) };
        let run = train_on(&data, &data[..1], None, &full, a.path(), None).unwrap();
        let half = TrainConfig { epochs: 1, ..full.clone() };
        train_on(&data, &data[..1], None, &half, b.path(), None).unwrap();
        let resumed = train_on(&data, &data[..1], None, &full, b.path(), Some(&b.path().join(FINAL_CHECKPOINT))).unwrap();
        assert_eq!(resumed.log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(resumed.log, run.log[1..]);
        assert_eq!(resumed.steps, run.steps);
    }

    #[test]
    fn best_checkpoint_is_no_worse_than_final() {
        let data = synth(3, 2, 30, 3);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 4, ..tiny_cfg(1) };
        let out = train_on(&data, &data, None, &cfg, dir.path(), None).unwrap();
        let last = out.log.last().unwrap().valid_loss.unwrap();
        assert!(out.best_valid_loss <= last);
        let best = Model::load(&out.best_path, Some(1)).unwrap();
        let (vl, _) = evaluate(&best, &data, &cfg).unwrap();
        assert!((vl - out.best_valid_loss).abs() < 1e-12);
    }

    #[test]
    fn variant_mismatch_on_resume() {
        let data = synth(2, 1, 20, 4);
        let dir = tempfile::tempdir().unwrap();
        train_on(&data, &[], None, &tiny_cfg(1), dir.path(), None).unwrap();
        let r = train_on(&data, &[], None, &tiny_cfg(3), dir.path(), Some(&dir.path().join(FINAL_CHECKPOINT)));
        assert!(matches!(r, Err(Error::VariantMismatch { found: 1, expected: 3 })));
    }

    #[test]
    fn non_finite_loss_aborts_with_ids() {
        let mut data = synth(2, 1, 20, 5);
        data[1].features.data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { batch_size: 1, ..tiny_cfg(1) };
        match train_on(&data, &[], None, &cfg, dir.path(), None) {
            Err(Error::NonFiniteLoss { ids, .. }) => assert_eq!(ids, vec!["s1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn capacity_checks() {
        let mut c = tiny_cfg(3).model;
        assert!(check_capacity(&c, 3).is_ok());
        assert!(check_capacity(&c, 4).is_err());
        c.attribute_count = 8;
        assert!(check_capacity(&c, 4).is_err());
        assert!(check_capacity(&tiny_cfg(1).model, 9).is_ok());
    }
}

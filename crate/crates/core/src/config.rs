//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every field of the
//! training, model and corpus configs is settable by name; list-valued
//! fields take comma-separated values.

use std::path::{Path, PathBuf};

use crate::datagen::{CorpusConfig, SynthesisLevel};
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> std::result::Result<Vec<Entry>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err((i + 1, format!("expected `key = value`, got `{line}`")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

/// A config struct whose fields can be set from strings.
pub trait Fields {
    /// `Ok(false)` when the key is not one of ours.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Applies every entry to the first target that knows the key.
pub fn apply(entries: &[Entry], path: &Path, targets: &mut [&mut dyn Fields]) -> Result<()> {
    for e in entries {
        let mut known = false;
        for t in targets.iter_mut() {
            match t.set(&e.key, &e.value) {
                Ok(true) => {
                    known = true;
                    break;
                }
                Ok(false) => {}
                Err(msg) => {
                    return Err(Error::Parse {
                        path: PathBuf::from(path),
                        line: e.line,
                        msg: format!("{}: {msg}", e.key),
                    })
                }
            }
        }
        if !known {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: e.line,
                msg: format!("unknown key `{}`", e.key),
            });
        }
    }
    Ok(())
}

pub fn render(targets: &[&dyn Fields]) -> String {
    targets
        .iter()
        .flat_map(|t| t.entries())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn counts(v: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = v.split(',').map(|p| num(p.trim())).collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected 4 comma-separated counts, got `{v}`"))
}

fn show_counts(c: &[usize; 4]) -> String {
    c.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Fields for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "batch_size" => self.batch_size = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "lr" => self.lr = num(v)?,
            "beta1" => self.adam.beta1 = num(v)?,
            "beta2" => self.adam.beta2 = num(v)?,
            "adam_eps" => self.adam.eps = num(v)?,
            "weight_decay" => self.adam.weight_decay = num(v)?,
            "warmup_steps" => self.warmup_steps = num(v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "noam" => LrSchedule::Noam,
                    _ => return Err(format!("expected `constant` or `noam`, got `{v}`")),
                }
            }
            "grad_clip" => self.grad_clip = num(v)?,
            "chunk_frames" => self.chunk_frames = num(v)?,
            "seed" => self.seed = num(v)?,
            "eval_every" => self.eval_every = num(v)?,
            "loss_alpha" => self.loss.alpha = num(v)?,
            "loss_beta" => self.loss.beta = num(v)?,
            "threshold" => self.threshold = num(v)?,
            "median_window" => self.median_window = num(v)?,
            "variant" => {
                let id: u32 = num(v)?;
                crate::model::variant_spec(id).map_err(|e| e.to_string())?;
                m.variant = id;
            }
            "layers" => e.layers = num(v)?,
            "d_model" => e.d_model = num(v)?,
            "heads" => e.heads = num(v)?,
            "ff_dim" => e.ff_dim = num(v)?,
            "conv_kernel" => e.conv_kernel = num(v)?,
            "dropout" => e.dropout = num(v)?,
            "positional_encoding" => e.positional_encoding = boolean(v)?,
            "input_dim" => e.input_dim = num(v)?,
            "attribute_count" => m.attribute_count = num(v)?,
            "attribute_dim" => {
                let d: usize = num(v)?;
                m.attribute_dim = (d > 0).then_some(d);
            }
            "max_attractors" => m.max_attractors = num(v)?,
            "eda_ff_dim" => m.eda_ff_dim = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        vec![
            ("variant", m.variant.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            (
                "lr_schedule",
                match self.lr_schedule {
                    LrSchedule::Constant => "constant",
                    LrSchedule::Noam => "noam",
                }
                .to_string(),
            ),
            ("grad_clip", self.grad_clip.to_string()),
            ("chunk_frames", self.chunk_frames.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("loss_alpha", self.loss.alpha.to_string()),
            ("loss_beta", self.loss.beta.to_string()),
            ("threshold", self.threshold.to_string()),
            ("median_window", self.median_window.to_string()),
            ("input_dim", e.input_dim.to_string()),
            ("layers", e.layers.to_string()),
            ("d_model", e.d_model.to_string()),
            ("heads", e.heads.to_string()),
            ("ff_dim", e.ff_dim.to_string()),
            ("conv_kernel", e.conv_kernel.to_string()),
            ("dropout", e.dropout.to_string()),
            ("positional_encoding", e.positional_encoding.to_string()),
            ("attribute_count", m.attribute_count.to_string()),
            ("attribute_dim", m.attribute_dim.unwrap_or(0).to_string()),
            ("max_attractors", m.max_attractors.to_string()),
            ("eda_ff_dim", m.eda_ff_dim.to_string()),
        ]
    }
}

impl Fields for CorpusConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        match key {
            "corpus_seed" => self.seed = num(v)?,
            "train_counts" => self.train_counts = counts(v)?,
            "valid_counts" => self.valid_counts = counts(v)?,
            "test_counts" => self.test_counts = counts(v)?,
            "min_frames" => self.min_frames = num(v)?,
            "max_frames" => self.max_frames = num(v)?,
            "p_on" => self.p_on = num(v)?,
            "p_off" => self.p_off = num(v)?,
            "feature_dim" => self.feature_dim = num(v)?,
            "voiceprint_scale" => self.voiceprint_scale = num(v)?,
            "noise_std" => self.noise_std = num(v)?,
            "snr_db_min" => self.snr_db_min = num(v)?,
            "snr_db_max" => self.snr_db_max = num(v)?,
            "speaker_pool" => self.speaker_pool = num(v)?,
            "level" => {
                self.level = match v {
                    "feature" => SynthesisLevel::Feature,
                    "waveform" => SynthesisLevel::Waveform,
                    _ => return Err(format!("expected `feature` or `waveform`, got `{v}`")),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus_seed", self.seed.to_string()),
            ("train_counts", show_counts(&self.train_counts)),
            ("valid_counts", show_counts(&self.valid_counts)),
            ("test_counts", show_counts(&self.test_counts)),
            ("min_frames", self.min_frames.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("p_on", self.p_on.to_string()),
            ("p_off", self.p_off.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("voiceprint_scale", self.voiceprint_scale.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("snr_db_min", self.snr_db_min.to_string()),
            ("snr_db_max", self.snr_db_max.to_string()),
            ("speaker_pool", self.speaker_pool.to_string()),
            (
                "level",
                match self.level {
                    SynthesisLevel::Feature => "feature",
                    SynthesisLevel::Waveform => "waveform",
                }
                .to_string(),
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies() {
        let text = "# comment\n\nbatch_size = 4\nvariant=4\ntrain_counts = 1, 2, 3, 0\nattribute_dim = 0\n";
        let entries = parse(text).unwrap();
        let mut t = TrainConfig::default();
        let mut c = CorpusConfig::default();
        apply(&entries, Path::new("x"), &mut [&mut t, &mut c]).unwrap();
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.model.variant, 4);
        assert_eq!(c.train_counts, [1, 2, 3, 0]);
        assert_eq!(t.model.attribute_dim, None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(parse("a = 1\nnonsense\n").unwrap_err().0, 2);
        let entries = parse("epochs = 1\nbogus = 3\n").unwrap();
        let mut t = TrainConfig::default();
        match apply(&entries, Path::new("cfg"), &mut [&mut t]) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        let entries = parse("variant = 9\n").unwrap();
        assert!(apply(&entries, Path::new("cfg"), &mut [&mut t]).is_err());
    }

    #[test]
    fn render_roundtrip() {
        let mut t = TrainConfig::default();
        t.model.variant = 3;
        t.model.attribute_dim = Some(32);
        t.lr = 5e-4;
        let mut c = CorpusConfig::default();
        c.level = SynthesisLevel::Waveform;
        let text = render(&[&t, &c]);
        let mut t2 = TrainConfig::default();
        let mut c2 = CorpusConfig::default();
        apply(&parse(&text).unwrap(), Path::new("x"), &mut [&mut t2, &mut c2]).unwrap();
        assert_eq!(t2, t);
        assert_eq!(c2, c);
    }
}

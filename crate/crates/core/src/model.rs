//! The seven diarization model variants.
//!
//! | id | encoder     | attractor generator        | intermediate conditioning            |
//! |----|-------------|----------------------------|--------------------------------------|
//! | 1  | transformer | LSTM EDA                   | none                                 |
//! | 2  | transformer | LSTM EDA                   | weighted, one EDA + `W` shared       |
//! | 5  | transformer | LSTM EDA                   | weighted, per-layer EDA + `W`        |
//! | 6  | transformer | LSTM EDA                   | cross-attention on speaker attractors|
//! | 7  | transformer | transformer EDA            | cross-attention on speaker attractors|
//! | 3  | transformer | attribute → speaker EDA    | cross-attention on attribute attractors |
//! | 4  | conformer   | attribute → speaker EDA    | cross-attention on attribute attractors |
//!
//! Every variant computes final posteriors as `σ(A Zᵀ)` where `Z` is the
//! normalised last-layer embedding and `A` the decoded speaker attractors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractors::{
    count_speakers, AttributeAttractorSet, CrossAttentionConditioner, DecoderEda, LstmEda, SpeakerAttractorSet,
    WeightedConditioner,
};
use crate::checkpoint::{self, round_to_f32};
use crate::encoder::{BlockKind, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::LayerNorm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdaKind {
    Lstm,
    Transformer,
    Attribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    None,
    Weighted { shared: bool },
    CrossSpeaker,
    CrossAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub block: BlockKind,
    pub eda: EdaKind,
    pub conditioning: Conditioning,
}

pub const VARIANTS: [u32; 7] = [1, 2, 3, 4, 5, 6, 7];

pub fn variant_spec(id: u32) -> Result<VariantSpec> {
    use Conditioning::*;
    let (block, eda, conditioning) = match id {
        1 => (BlockKind::Transformer, EdaKind::Lstm, None),
        2 => (BlockKind::Transformer, EdaKind::Lstm, Weighted { shared: true }),
        3 => (BlockKind::Transformer, EdaKind::Attribute, CrossAttribute),
        4 => (BlockKind::Conformer, EdaKind::Attribute, CrossAttribute),
        5 => (BlockKind::Transformer, EdaKind::Lstm, Weighted { shared: false }),
        6 => (BlockKind::Transformer, EdaKind::Lstm, CrossSpeaker),
        7 => (BlockKind::Transformer, EdaKind::Transformer, CrossSpeaker),
        _ => return Err(Error::InvalidArgument(format!("variant must be 1..=7, got {id}"))),
    };
    Ok(VariantSpec {
        block,
        eda,
        conditioning,
    })
}

pub fn variant_name(id: u32) -> &'static str {
    match id {
        1 => "EEND-EDA",
        2 => "EEND-EDA-deep",
        3 => "Attribute attractors",
        4 => "3 + Conformer",
        5 => "2 + Non-shared EDA",
        6 => "5 + Cross attention",
        7 => "6 + TransformerEDA",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: u32,
    pub encoder: EncoderConfig,
    /// Number of attribute attractors `N`.
    pub attribute_count: usize,
    /// Width of attribute attractors; `None` means the model width.
    pub attribute_dim: Option<usize>,
    /// Attractor slots decoded at inference (`S_max`).
    pub max_attractors: usize,
    pub eda_ff_dim: usize,
    /// Intermediate speaker heads of attribute variants removed.
    pub pruned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: 1,
            encoder: EncoderConfig::default(),
            attribute_count: 8,
            attribute_dim: None,
            max_attractors: 8,
            eda_ff_dim: 128,
            pruned: false,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: u32) -> Result<Self> {
        let spec = variant_spec(variant)?;
        let mut cfg = Self {
            variant,
            ..Self::default()
        };
        cfg.encoder.block_kind = spec.block;
        Ok(cfg)
    }

    pub fn spec(&self) -> Result<VariantSpec> {
        variant_spec(self.variant)
    }

    pub fn attr_dim(&self) -> usize {
        self.attribute_dim.unwrap_or(self.encoder.d_model)
    }

    /// Flat numeric encoding stored in checkpoints as `meta.config`.
    fn to_vector(&self) -> Vec<f64> {
        let e = &self.encoder;
        vec![
            self.variant as f64,
            e.input_dim as f64,
            e.layers as f64,
            e.d_model as f64,
            e.heads as f64,
            e.ff_dim as f64,
            matches!(e.block_kind, BlockKind::Conformer) as u8 as f64,
            e.conv_kernel as f64,
            (e.dropout * 1e6).round(),
            e.positional_encoding as u8 as f64,
            self.attribute_count as f64,
            self.attribute_dim.unwrap_or(0) as f64,
            self.max_attractors as f64,
            self.eda_ff_dim as f64,
            self.pruned as u8 as f64,
        ]
    }

    fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() != 15 {
            return Err(Error::Format(format!("meta.config has {} entries, expected 15", v.len())));
        }
        let u = |i: usize| v[i] as usize;
        Ok(Self {
            variant: v[0] as u32,
            encoder: EncoderConfig {
                input_dim: u(1),
                layers: u(2),
                d_model: u(3),
                heads: u(4),
                ff_dim: u(5),
                block_kind: if v[6] != 0.0 { BlockKind::Conformer } else { BlockKind::Transformer },
                conv_kernel: u(7),
                dropout: v[8] / 1e6,
                positional_encoding: v[9] != 0.0,
            },
            attribute_count: u(10),
            attribute_dim: (v[11] != 0.0).then(|| u(11)),
            max_attractors: u(12),
            eda_ff_dim: u(13),
            pruned: v[14] != 0.0,
        })
    }
}

#[derive(Debug, Clone)]
enum Head {
    Lstm(LstmEda),
    Transformer(DecoderEda),
    Attribute {
        attr: DecoderEda,
        speaker: Option<DecoderEda>,
    },
}

#[derive(Debug, Clone)]
enum Conditioner {
    Weighted(WeightedConditioner),
    Cross(CrossAttentionConditioner),
}

#[derive(Debug, Clone)]
struct IntermediateLayer {
    head: Head,
    cond: Conditioner,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Decode `speakers + 1` attractors; posteriors use the first
    /// `speakers`.
    Train { speakers: usize, shuffle_seed: u64 },
    /// Decode `max_attractors` slots and keep the leading run whose
    /// existence probability reaches `threshold`.
    Infer { shuffle_seed: u64, threshold: f64 },
}

/// What one EDA layer produced.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// 1-based encoder layer.
    pub layer: usize,
    pub attractors: Option<SpeakerAttractorSet>,
    pub attributes: Option<AttributeAttractorSet>,
    /// Attractor rows used for posteriors.
    pub speakers: usize,
    /// `speakers × T` activity posteriors.
    pub posteriors: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Block outputs `E_1..E_L`.
    pub embeddings: Vec<Var>,
    /// Layers `1..L−1`; empty for variant 1.
    pub intermediate: Vec<LayerPrediction>,
    pub last: LayerPrediction,
}

/// Feature normalisation applied before the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub norm: Option<FeatureNorm>,
    encoder: Encoder,
    out_norm: LayerNorm,
    intermediate: Vec<IntermediateLayer>,
    last: Head,
}

fn mix_seed(seed: u64, layer: usize) -> u64 {
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model {
    /// Fresh model with parameters drawn from `seed`, rounded to `f32`
    /// precision so checkpoints round-trip exactly.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let spec = cfg.spec()?;
        let mut cfg = cfg.clone();
        cfg.encoder.block_kind = spec.block;
        if cfg.max_attractors < 1 || cfg.attribute_count < 1 {
            return Err(Error::InvalidArgument("max_attractors and attribute_count must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = cfg.encoder.d_model;
        let heads = cfg.encoder.heads;
        let layers = cfg.encoder.layers;
        let encoder = Encoder::new(&mut store, &cfg.encoder, rng)?;
        let out_norm = LayerNorm::new(&mut store, "enc.out.norm", d);

        let make_head = |store: &mut ParamStore, l: &str, with_speaker: bool, rng: &mut ChaCha8Rng| -> Result<Head> {
            Ok(match spec.eda {
                EdaKind::Lstm => Head::Lstm(LstmEda::new(store, &format!("eda.{l}.spk"), d, rng)),
                EdaKind::Transformer => Head::Transformer(DecoderEda::new(
                    store,
                    &format!("eda.{l}.spk"),
                    cfg.max_attractors,
                    d,
                    d,
                    heads,
                    cfg.eda_ff_dim,
                    true,
                    true,
                    rng,
                )?),
                EdaKind::Attribute => {
                    let da = cfg.attr_dim();
                    let attr = DecoderEda::new(
                        store,
                        &format!("eda.{l}.attr"),
                        cfg.attribute_count,
                        da,
                        d,
                        heads,
                        cfg.eda_ff_dim,
                        false,
                        false,
                        rng,
                    )?;
                    let speaker = if with_speaker {
                        Some(DecoderEda::new(
                            store,
                            &format!("eda.{l}.spk"),
                            cfg.max_attractors,
                            d,
                            da,
                            heads,
                            cfg.eda_ff_dim,
                            true,
                            true,
                            rng,
                        )?)
                    } else {
                        None
                    };
                    Head::Attribute { attr, speaker }
                }
            })
        };
        let make_cond = |store: &mut ParamStore, l: &str, rng: &mut ChaCha8Rng| -> Result<Conditioner> {
            Ok(match spec.conditioning {
                Conditioning::Weighted { .. } => {
                    Conditioner::Weighted(WeightedConditioner::new(store, &format!("cond.{l}"), d, rng))
                }
                Conditioning::CrossSpeaker => Conditioner::Cross(CrossAttentionConditioner::new(
                    store,
                    &format!("cond.{l}"),
                    d,
                    d,
                    heads,
                    rng,
                )?),
                Conditioning::CrossAttribute => Conditioner::Cross(CrossAttentionConditioner::new(
                    store,
                    &format!("cond.{l}"),
                    d,
                    cfg.attr_dim(),
                    heads,
                    rng,
                )?),
                Conditioning::None => unreachable!("no conditioner without conditioning"),
            })
        };

        let intermediate = match spec.conditioning {
            Conditioning::None => vec![],
            Conditioning::Weighted { shared: true } => {
                let layer = IntermediateLayer {
                    head: make_head(&mut store, "shared", true, rng)?,
                    cond: make_cond(&mut store, "shared", rng)?,
                };
                vec![layer; layers - 1]
            }
            _ => (1..layers)
                .map(|l| {
                    let name = l.to_string();
                    Ok(IntermediateLayer {
                        head: make_head(&mut store, &name, !cfg.pruned, rng)?,
                        cond: make_cond(&mut store, &name, rng)?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let last = make_head(&mut store, &layers.to_string(), true, rng)?;

        for id in store.ids().collect::<Vec<_>>() {
            round_to_f32(store.get_mut(id));
        }
        Ok(Self {
            cfg,
            store,
            norm: None,
            encoder,
            out_norm,
            intermediate,
            last,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn variant(&self) -> u32 {
        self.cfg.variant
    }

    pub fn layers(&self) -> usize {
        self.cfg.encoder.layers
    }

    /// Whether intermediate layers produce speaker posteriors.
    pub fn has_intermediate_predictions(&self) -> bool {
        self.intermediate.iter().any(|l| match &l.head {
            Head::Attribute { speaker, .. } => speaker.is_some(),
            _ => true,
        })
    }

    fn run_head(
        &self,
        g: &mut Graph,
        head: &Head,
        z: Var,
        layer: usize,
        mode: Mode,
    ) -> Result<LayerPrediction> {
        let store = &self.store;
        let count = match mode {
            Mode::Train { speakers, .. } => speakers + 1,
            Mode::Infer { .. } => self.cfg.max_attractors,
        };
        let (attractors, attributes) = match head {
            Head::Lstm(eda) => {
                let seed = match mode {
                    Mode::Train { shuffle_seed, .. } | Mode::Infer { shuffle_seed, .. } => {
                        mix_seed(shuffle_seed, layer)
                    }
                };
                (Some(eda.forward(g, store, z, count, seed)?), None)
            }
            Head::Transformer(dec) => (Some(dec.speakers(g, store, z, count)?), None),
            Head::Attribute { attr, speaker } => {
                let aa = attr.attributes(g, store, z)?;
                let sa = match speaker {
                    Some(s) => Some(s.speakers(g, store, aa.attractors, count)?),
                    None => None,
                };
                (sa, Some(aa))
            }
        };
        let speakers = match (mode, &attractors) {
            (_, None) => 0,
            (Mode::Train { speakers, .. }, Some(_)) => speakers,
            (Mode::Infer { threshold, .. }, Some(sa)) => count_speakers(&sa.existence_probs(g), threshold),
        };
        let posteriors = match &attractors {
            Some(sa) => {
                let a = if speakers == sa.len(g) {
                    sa.attractors
                } else {
                    g.slice_rows(sa.attractors, 0, speakers)?
                };
                let logits = g.matmul_t(a, z)?;
                Some(g.sigmoid(logits))
            }
            None => None,
        };
        Ok(LayerPrediction {
            layer,
            attractors,
            attributes,
            speakers,
            posteriors,
        })
    }

    fn condition(
        &self,
        g: &mut Graph,
        layer: &IntermediateLayer,
        e: Var,
        z: Var,
        pred: &LayerPrediction,
    ) -> Result<Var> {
        let spk = |g: &mut Graph| -> Result<Option<Var>> {
            match pred.attractors {
                Some(sa) if pred.speakers > 0 => Ok(Some(g.slice_rows(sa.attractors, 0, pred.speakers)?)),
                _ => Ok(None),
            }
        };
        match (&layer.cond, pred.attributes) {
            (Conditioner::Cross(c), Some(aa)) => c.forward(g, &self.store, e, aa.attractors),
            (Conditioner::Cross(c), None) => match spk(g)? {
                Some(a) => c.forward(g, &self.store, e, a),
                None => Ok(e),
            },
            (Conditioner::Weighted(w), _) => match spk(g)? {
                Some(a) => w.forward(g, &self.store, e, z, a),
                None => Ok(e),
            },
        }
    }

    /// Full forward pass from raw `T×input_dim` features.
    pub fn forward(&self, g: &mut Graph, features: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let (t, din) = features.dims2();
        if t == 0 {
            return Err(Error::EmptyInput("feature matrix has no frames".into()));
        }
        if din != self.cfg.encoder.input_dim {
            return Err(Error::dim("Model::forward", features.shape(), &[t, self.cfg.encoder.input_dim]));
        }
        if let Mode::Train { speakers, .. } = mode {
            let room = match self.spec().eda {
                EdaKind::Lstm => usize::MAX,
                _ => self.cfg.max_attractors,
            };
            if speakers == 0 || speakers + 1 > room {
                return Err(Error::InvalidArgument(format!(
                    "cannot train on {speakers} speakers with {} attractor slots",
                    self.cfg.max_attractors
                )));
            }
        }
        let x = match &self.norm {
            Some(n) => n.apply(features),
            None => features.clone(),
        };
        let x = g.constant(x);
        let x0 = self.encoder.project(g, &self.store, x)?;
        let mut preds = Vec::with_capacity(self.intermediate.len());
        let embeddings = self.encoder.encode(g, &self.store, x0, |g, l, e| {
            let Some(layer) = self.intermediate.get(l - 1) else {
                return Ok(e);
            };
            let z = self.out_norm.forward(g, &self.store, e)?;
            let pred = self.run_head(g, &layer.head, z, l, mode)?;
            let next = self.condition(g, layer, e, z, &pred)?;
            preds.push(pred);
            Ok(next)
        })?;
        let e_last = *embeddings.last().expect("at least one layer");
        let z = self.out_norm.forward(g, &self.store, e_last)?;
        let last = self.run_head(g, &self.last, z, self.layers(), mode)?;
        Ok(ForwardOutput {
            embeddings,
            intermediate: preds,
            last,
        })
    }

    fn spec(&self) -> VariantSpec {
        variant_spec(self.cfg.variant).expect("validated at construction")
    }

    /// Copy of this model with intermediate speaker heads removed.
    pub fn pruned(&self) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.pruned = true;
        let mut out = Self::new(&cfg, 0)?;
        out.copy_params_from(&self.store)?;
        out.norm = self.norm.clone();
        Ok(out)
    }

    fn copy_params_from(&mut self, src: &ParamStore) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            let value = src.by_name(&name).ok_or(Error::MissingParam(name.clone()))?;
            if value.shape() != self.store.get(id).shape() {
                return Err(Error::dim("load parameter", self.store.get(id).shape(), value.shape()));
            }
            *self.store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn round_params(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            round_to_f32(self.store.get_mut(id));
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("meta.variant".to_string(), Tensor::vector(vec![self.cfg.variant as f64])),
            ("meta.config".to_string(), Tensor::vector(self.cfg.to_vector())),
        ];
        if let Some(n) = &self.norm {
            out.push(("meta.feat_mean".into(), Tensor::vector(n.mean.clone())));
            out.push(("meta.feat_std".into(), Tensor::vector(n.std.clone())));
        }
        out.extend(self.store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        out
    }

    /// Rebuilds a model from named tensors; extra entries (optimizer state,
    /// counters) are ignored.
    pub fn from_tensors(tensors: &[(String, Tensor)], expected_variant: Option<u32>) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let variant = find("meta.variant")
            .ok_or_else(|| Error::MissingParam("meta.variant".into()))?
            .item() as u32;
        if let Some(expected) = expected_variant {
            if expected != variant {
                return Err(Error::VariantMismatch {
                    found: variant,
                    expected,
                });
            }
        }
        let cfg = ModelConfig::from_vector(
            find("meta.config")
                .ok_or_else(|| Error::MissingParam("meta.config".into()))?
                .data(),
        )?;
        let mut model = Self::new(&cfg, 0)?;
        let mut src = ParamStore::new();
        for (n, t) in tensors {
            if !n.starts_with("meta.") && !n.starts_with("opt.") {
                src.add(n.clone(), t.clone());
            }
        }
        model.copy_params_from(&src)?;
        if let (Some(m), Some(s)) = (find("meta.feat_mean"), find("meta.feat_std")) {
            model.norm = Some(FeatureNorm {
                mean: m.data().to_vec(),
                std: s.data().to_vec(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path, expected_variant: Option<u32>) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, expected_variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;

    pub(crate) fn tiny(variant: u32) -> ModelConfig {
        let mut c = ModelConfig::for_variant(variant).unwrap();
        c.encoder.input_dim = 6;
        c.encoder.layers = 3;
        c.encoder.d_model = 8;
        c.encoder.heads = 2;
        c.encoder.ff_dim = 16;
        c.encoder.conv_kernel = 3;
        c.encoder.dropout = 0.0;
        c.attribute_count = 4;
        c.max_attractors = 4;
        c.eda_ff_dim = 16;
        c
    }

    #[test]
    fn every_variant_trains_and_infers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal(&mut rng, &[9, 6], 1.0);
        for v in VARIANTS {
            let m = Model::new(&tiny(v), 1).unwrap();
            let mut g = Graph::new();
            let out = m
                .forward(&mut g, &x, Mode::Train { speakers: 2, shuffle_seed: 0 })
                .unwrap();
            assert_eq!(out.embeddings.len(), 3);
            assert_eq!(g.shape(out.last.posteriors.unwrap()), &[2, 9]);
            let expected_inter = if v == 1 { 0 } else { 2 };
            assert_eq!(out.intermediate.len(), expected_inter, "variant {v}");
            for p in &out.intermediate {
                assert_eq!(g.shape(p.posteriors.unwrap()), &[2, 9]);
                assert_eq!(g.value(p.attractors.unwrap().existence_logits).len(), 3);
            }
            let mut g = Graph::new();
            let out = m
                .forward(&mut g, &x, Mode::Infer { shuffle_seed: 0, threshold: 0.5 })
                .unwrap();
            let s = out.last.speakers;
            assert!(s <= 4);
            assert_eq!(g.value(out.last.posteriors.unwrap()).rows(), s);
        }
    }

    #[test]
    fn shared_variant_has_fewer_params_than_unshared() {
        let p2 = Model::new(&tiny(2), 0).unwrap().num_params();
        let p5 = Model::new(&tiny(5), 0).unwrap().num_params();
        let p1 = Model::new(&tiny(1), 0).unwrap().num_params();
        assert!(p1 < p2 && p2 < p5);
    }

    #[test]
    fn config_vector_roundtrip() {
        let mut c = tiny(4);
        c.attribute_dim = Some(12);
        c.encoder.dropout = 0.1;
        assert_eq!(ModelConfig::from_vector(&c.to_vector()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_variant_and_empty_input() {
        assert!(ModelConfig::for_variant(8).is_err());
        let m = Model::new(&tiny(1), 0).unwrap();
        let mut g = Graph::new();
        let r = m.forward(&mut g, &Tensor::zeros(&[0, 6]), Mode::Infer { shuffle_seed: 0, threshold: 0.5 });
        assert!(matches!(r, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn attribute_dim_reading() {
        let mut c = tiny(3);
        c.attribute_dim = Some(6);
        let m = Model::new(&c, 0).unwrap();
        let x = normal(&mut ChaCha8Rng::seed_from_u64(1), &[5, 6], 1.0);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, Mode::Train { speakers: 1, shuffle_seed: 0 }).unwrap();
        assert_eq!(g.shape(out.last.attributes.unwrap().attractors), &[4, 6]);
    }
}

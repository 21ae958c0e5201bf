//! Trained model to speaker activity: pruning, decoding, post-processing.

use log::info;

use crate::error::{Error, Result};
use crate::graph::{self, Graph};
use crate::model::{Mode, Model};
use crate::tensor::Tensor;

/// Existence probability a decoded attractor needs to count as a speaker.
pub const EXISTENCE_THRESHOLD: f64 = 0.5;
/// Frame-shuffle seed for LSTM attractor decoding at inference.
pub const INFERENCE_SHUFFLE_SEED: u64 = 0;

/// Drops the intermediate speaker heads of attribute-attractor models.
/// Other variants come back unchanged with `false`.
pub fn prune_for_inference(model: &Model) -> Result<(Model, bool)> {
    if model.cfg.pruned || !matches!(model.variant(), 3 | 4) {
        if !model.cfg.pruned {
            info!("variant {} has no prunable heads; model left as is", model.variant());
        }
        return Ok((model.clone(), false));
    }
    Ok((model.pruned()?, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diarization {
    /// `S × T` final posteriors, `S` the estimated speaker count.
    pub posteriors: Tensor,
    /// `(layer, posteriors)` for every layer that predicts speakers, ending
    /// with the last one; only filled when requested.
    pub per_layer: Vec<(usize, Tensor)>,
    pub shuffle_seed: u64,
}

/// `σ(A Zᵀ)` for fixed attractors and embeddings.
pub fn posteriors_from(attractors: &Tensor, embeddings: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let a = g.constant(attractors.clone());
    let z = g.constant(embeddings.clone());
    let logits = g.matmul_t(a, z).expect("attractor and embedding widths agree");
    g.value(logits).map(graph::sigmoid)
}

pub fn diarize(model: &Model, features: &Tensor, per_layer: bool) -> Result<Diarization> {
    if features.rows() == 0 {
        return Err(Error::EmptyInput("recording has no frames".into()));
    }
    if per_layer && !model.has_intermediate_predictions() {
        return Err(Error::InvalidArgument(format!(
            "variant {} (pruned: {}) has no intermediate speaker predictions",
            model.variant(),
            model.cfg.pruned
        )));
    }
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        features,
        Mode::Infer {
            shuffle_seed: INFERENCE_SHUFFLE_SEED,
            threshold: EXISTENCE_THRESHOLD,
        },
    )?;
    let t = features.rows();
    let value = |g: &Graph, p: Option<crate::graph::Var>| match p {
        Some(v) => g.value(v).clone(),
        None => Tensor::zeros(&[0, t]),
    };
    let posteriors = value(&g, out.last.posteriors);
    let layers = if per_layer {
        out.intermediate
            .iter()
            .map(|p| (p.layer, value(&g, p.posteriors)))
            .chain(std::iter::once((out.last.layer, posteriors.clone())))
            .collect()
    } else {
        vec![]
    };
    Ok(Diarization {
        posteriors,
        per_layer: layers,
        shuffle_seed: INFERENCE_SHUFFLE_SEED,
    })
}

/// Thresholds, then median-filters each speaker row over `median_window`
/// frames with zero padding at both ends.
pub fn binarize(posteriors: &Tensor, threshold: f64, median_window: usize) -> Result<Tensor> {
    if median_window == 0 || median_window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median window must be odd, got {median_window}")));
    }
    let hard = posteriors.map(|p| (p > threshold) as u8 as f64);
    if median_window == 1 {
        return Ok(hard);
    }
    let (s, t) = hard.dims2();
    let half = median_window / 2;
    let mut out = Tensor::zeros(&[s, t]);
    for k in 0..s {
        let row = hard.row(k);
        for f in 0..t {
            let lo = f.saturating_sub(half);
            let hi = (f + half + 1).min(t);
            let ones = row[lo..hi].iter().filter(|&&v| v != 0.0).count();
            if ones > half {
                out.set(k, f, 1.0);
            }
        }
    }
    Ok(out)
}

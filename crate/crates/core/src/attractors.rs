//! Encoder-decoder attractors and the intermediate conditioning paths.
//!
//! Three attractor generators share one output shape:
//!
//! - [`LstmEda`]: an LSTM reads time-shuffled frames, its final state
//!   seeds a decoder LSTM driven by zero inputs; one attractor per step.
//! - [`DecoderEda`] in causal mode: learned query slots attend causally to
//!   each other and cross-attend to a memory (frames, or attribute
//!   attractors). Slot `k` never sees slots after it, so decoding `S_max`
//!   slots at once and keeping a prefix is the same as decoding one by one.
//! - [`DecoderEda`] in full mode with no existence head: attribute
//!   attractors, `N` slots over-segmenting speaker space.
//!
//! Conditioning feeds a layer's attractors back into the frame stream:
//! [`WeightedConditioner`] adds `σ(Z Aᵀ)·A·W`, [`CrossAttentionConditioner`]
//! adds `MHA(LN(E), A)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::nn::{query_table, Activation, FeedForward, LayerNorm, Linear, Lstm, MultiHeadAttention};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Speaker attractors (`S'×D`) with one existence logit each (`S'×1`).
#[derive(Debug, Clone, Copy)]
pub struct SpeakerAttractorSet {
    pub attractors: Var,
    pub existence_logits: Var,
}

impl SpeakerAttractorSet {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.attractors).rows()
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    pub fn existence_probs(&self, g: &Graph) -> Vec<f64> {
        g.value(self.existence_logits).data().iter().map(|&z| sigmoid(z)).collect()
    }
}

/// `N×Da` attribute attractors.
#[derive(Debug, Clone, Copy)]
pub struct AttributeAttractorSet {
    pub attractors: Var,
}

/// Number of leading existence probabilities at or above `threshold`:
/// decoding stops at the first slot that fails.
pub fn count_speakers(existence_probs: &[f64], threshold: f64) -> usize {
    existence_probs.iter().take_while(|&&p| p >= threshold).count()
}

/// Existence targets `(1, …, 1, 0)` for `speakers` real speakers plus the
/// terminating slot.
pub fn existence_labels(speakers: usize) -> Tensor {
    let mut v = vec![1.0; speakers + 1];
    v[speakers] = 0.0;
    Tensor::new(vec![speakers + 1, 1], v).expect("shape")
}

fn existence_head<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Linear {
    Linear::new(store, &format!("{name}.exist"), d, 1, rng)
}

/// Classic EDA with LSTM encoder and decoder.
#[derive(Debug, Clone)]
pub struct LstmEda {
    pub encoder: Lstm,
    pub decoder: Lstm,
    pub exist: Linear,
}

impl LstmEda {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            encoder: Lstm::new(store, &format!("{name}.enc_lstm"), d, d, rng),
            decoder: Lstm::new(store, &format!("{name}.dec_lstm"), d, d, rng),
            exist: existence_head(store, name, d, rng),
        }
    }

    /// Decodes `count` attractors from `T×D` embeddings. Frames are read in
    /// an order shuffled by `shuffle_seed`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e: Var,
        count: usize,
        shuffle_seed: u64,
    ) -> Result<SpeakerAttractorSet> {
        if count == 0 {
            return Err(Error::InvalidArgument("attractor count must be ≥ 1".into()));
        }
        let t = g.value(e).rows();
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let shuffled = g.gather_rows(e, &order)?;
        let proj = self.encoder.project_inputs(g, store, shuffled)?;
        let (mut h, mut c) = self.encoder.zero_state(g);
        for step in 0..t {
            let row = g.slice_rows(proj, step, 1)?;
            (h, c) = self.encoder.cell(g, store, row, h, c)?;
        }
        // zero inputs: the input projection reduces to its bias
        let bias = g.param(store, self.decoder.wx.b.expect("decoder input bias"));
        let hidden = self.decoder.hidden;
        // 1×4H view of the bias vector
        let x_gates = g.gather_rows(bias, &[0])?;
        debug_assert_eq!(g.shape(x_gates), &[1, 4 * hidden]);
        let mut outs = Vec::with_capacity(count);
        for _ in 0..count {
            (h, c) = self.decoder.cell(g, store, x_gates, h, c)?;
            outs.push(h);
        }
        let attractors = g.concat_rows(&outs)?;
        let existence_logits = self.exist.forward(g, store, attractors)?;
        Ok(SpeakerAttractorSet {
            attractors,
            existence_logits,
        })
    }
}

/// One decoder block over learned query slots: self-attention among the
/// slots (causal or full), cross-attention to a memory, feed-forward, and a
/// final layer norm. All sublayers are pre-norm residual.
#[derive(Debug, Clone)]
pub struct DecoderEda {
    pub queries: ParamId,
    pub slots: usize,
    pub causal: bool,
    pub ln_self: LayerNorm,
    pub self_att: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_att: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub ln_out: LayerNorm,
    pub exist: Option<Linear>,
}

impl DecoderEda {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        slots: usize,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        ff_dim: usize,
        causal: bool,
        with_existence: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            queries: query_table(store, name, slots, dim, rng),
            slots,
            causal,
            ln_self: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            self_att: MultiHeadAttention::new(store, &format!("{name}.self_att"), dim, dim, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            cross_att: MultiHeadAttention::new(store, &format!("{name}.cross_att"), dim, memory_dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, Activation::Relu, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.out_norm"), dim),
            exist: with_existence.then(|| existence_head(store, name, dim, rng)),
        })
    }

    /// Outputs for the first `count` slots attending to `memory`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, count: usize) -> Result<Var> {
        if count == 0 || count > self.slots {
            return Err(Error::InvalidArgument(format!(
                "requested {count} attractors from a decoder with {} slots",
                self.slots
            )));
        }
        let table = g.param(store, self.queries);
        let q = if count == self.slots { table } else { g.slice_rows(table, 0, count)? };
        let h = self.ln_self.forward(g, store, q)?;
        let a = self.self_att.forward(g, store, h, h, self.causal, 0.0)?.out;
        let q = g.add(q, a)?;
        let h = self.ln_cross.forward(g, store, q)?;
        let a = self.cross_att.forward(g, store, h, memory, false, 0.0)?.out;
        let q = g.add(q, a)?;
        let h = self.ln_ff.forward(g, store, q)?;
        let f = self.ff.forward(g, store, h, 0.0)?;
        let q = g.add(q, f)?;
        self.ln_out.forward(g, store, q)
    }

    /// Speaker attractors with existence logits.
    pub fn speakers(&self, g: &mut Graph, store: &ParamStore, memory: Var, count: usize) -> Result<SpeakerAttractorSet> {
        let exist = self
            .exist
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("decoder has no existence head".into()))?;
        let attractors = self.decode(g, store, memory, count)?;
        let existence_logits = exist.forward(g, store, attractors)?;
        Ok(SpeakerAttractorSet {
            attractors,
            existence_logits,
        })
    }

    /// All slots, no existence head: attribute attractors.
    pub fn attributes(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Result<AttributeAttractorSet> {
        Ok(AttributeAttractorSet {
            attractors: self.decode(g, store, memory, self.slots)?,
        })
    }
}

/// `Ê = E + σ(Z Aᵀ)·A·W`: frame-wise activity posteriors weight the
/// attractors, which are projected by `W` and added to the stream.
#[derive(Debug, Clone)]
pub struct WeightedConditioner {
    pub w: ParamId,
}

impl WeightedConditioner {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(rng, d, d)),
        }
    }

    /// `e` is the residual stream, `z` the embeddings the posteriors are
    /// computed from (the normalised `e`), `attractors` is `S×D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var, z: Var, attractors: Var) -> Result<Var> {
        if g.value(attractors).rows() == 0 {
            return Ok(e);
        }
        let logits = g.matmul_t(z, attractors)?;
        let post = g.sigmoid(logits);
        let mixed = g.matmul(post, attractors)?;
        let w = g.param(store, self.w);
        let proj = g.matmul(mixed, w)?;
        g.add(e, proj)
    }
}

/// `Ê = E + MHA(LN(E), A)`: frames query the attractor set.
#[derive(Debug, Clone)]
pub struct CrossAttentionConditioner {
    pub norm: LayerNorm,
    pub att: MultiHeadAttention,
}

impl CrossAttentionConditioner {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        memory_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), d, memory_dim, heads, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var, memory: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, e, memory)?.0)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e: Var,
        memory: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(memory).rows() == 0 {
            return Ok((e, vec![]));
        }
        let q = self.norm.forward(g, store, e)?;
        let att = self.att.forward(g, store, q, memory, false, 0.0)?;
        Ok((g.add(e, att.out)?, att.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::tol;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn count_speakers_stops_at_first_failure() {
        assert_eq!(count_speakers(&[0.9, 0.8, 0.2], 0.5), 2);
        assert_eq!(count_speakers(&[0.4, 0.9], 0.5), 0);
        assert_eq!(count_speakers(&[0.9, 0.3, 0.9], 0.5), 1);
        assert_eq!(count_speakers(&[], 0.5), 0);
    }

    #[test]
    fn lstm_eda_shapes() {
        let mut r = rng(0);
        let mut store = ParamStore::new();
        let eda = LstmEda::new(&mut store, "eda", 6, &mut r);
        let mut g = Graph::new();
        let e = g.constant(normal(&mut r, &[1, 6], 1.0));
        let s = eda.forward(&mut g, &store, e, 2, 0).unwrap();
        assert_eq!(g.shape(s.attractors), &[2, 6]);
        assert_eq!(g.value(s.existence_logits).len(), 2);
    }

    #[test]
    fn lstm_eda_depends_on_shuffle() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let eda = LstmEda::new(&mut store, "eda", 6, &mut r);
        let x = normal(&mut r, &[12, 6], 1.0);
        let run = |seed| {
            let mut g = Graph::new();
            let e = g.constant(x.clone());
            let s = eda.forward(&mut g, &store, e, 3, seed).unwrap();
            g.value(s.attractors).clone()
        };
        assert_eq!(run(4), run(4));
        assert!(run(4).max_abs_diff(&run(5)) > 1e-6);
    }

    #[test]
    fn zero_weight_lstm_gives_identical_attractors() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let eda = LstmEda::new(&mut store, "eda", 4, &mut r);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("lstm") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let mut g = Graph::new();
        let e = g.constant(normal(&mut r, &[5, 4], 1.0));
        let s = eda.forward(&mut g, &store, e, 3, 0).unwrap();
        let a = g.value(s.attractors);
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(a.row(1), a.row(2));
    }

    fn decoder(r: &mut ChaCha8Rng, store: &mut ParamStore, causal: bool, exist: bool) -> DecoderEda {
        DecoderEda::new(store, "dec", 5, 8, 8, 2, 16, causal, exist, r).unwrap()
    }

    #[test]
    fn transformer_eda_ignores_frame_order() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let dec = decoder(&mut r, &mut store, true, true);
        let x = normal(&mut r, &[10, 8], 1.0);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut r);
        let mut g = Graph::new();
        let e1 = g.constant(x.clone());
        let e2 = g.constant(x.select_rows(&perm));
        let a = dec.speakers(&mut g, &store, e1, 4).unwrap();
        let b = dec.speakers(&mut g, &store, e2, 4).unwrap();
        assert!(g.value(a.attractors).max_abs_diff(g.value(b.attractors)) <= tol::PERMUTATION);
        assert_eq!(g.shape(a.attractors), &[4, 8]);
    }

    #[test]
    fn causal_slots_do_not_see_later_slots() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let dec = decoder(&mut r, &mut store, true, true);
        let x = normal(&mut r, &[6, 8], 1.0);
        let before = {
            let mut g = Graph::new();
            let e = g.constant(x.clone());
            let a = dec.decode(&mut g, &store, e, 5).unwrap();
            g.value(a).clone()
        };
        // perturb query slots 3 and 4
        let q = store.get_mut(dec.queries);
        for v in &mut q.data_mut()[3 * 8..] {
            *v += 1.0;
        }
        let mut g = Graph::new();
        let e = g.constant(x);
        let a = dec.decode(&mut g, &store, e, 5).unwrap();
        let after = g.value(a);
        for k in 0..3 {
            assert_eq!(after.row(k), before.row(k), "slot {k}");
        }
        assert_ne!(after.row(3), before.row(3));
        // prefix decoding equals full decoding
        let mut g2 = Graph::new();
        let e2 = g2.constant(normal(&mut rng(9), &[6, 8], 1.0));
        let full = dec.decode(&mut g2, &store, e2, 5).unwrap();
        let pre = dec.decode(&mut g2, &store, e2, 2).unwrap();
        assert_eq!(g2.value(pre).row(1), g2.value(full).row(1));
    }

    #[test]
    fn attribute_eda_shape_and_symmetry() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let dec = decoder(&mut r, &mut store, false, false);
        for t in [1, 7] {
            let mut g = Graph::new();
            let e = g.constant(normal(&mut r, &[t, 8], 1.0));
            let aa = dec.attributes(&mut g, &store, e).unwrap();
            assert_eq!(g.shape(aa.attractors), &[5, 8]);
        }
        // identical slots stay identical: symmetry must come from the queries
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        *store.get_mut(dec.queries) = Tensor::from_rows(&vec![row; 5]).unwrap();
        let mut g = Graph::new();
        let e = g.constant(normal(&mut r, &[7, 8], 1.0));
        let aa = dec.attributes(&mut g, &store, e).unwrap();
        let v = g.value(aa.attractors);
        for k in 1..5 {
            assert!(crate::tensor::Tensor::vector(v.row(k).to_vec())
                .max_abs_diff(&Tensor::vector(v.row(0).to_vec()))
                < 1e-12);
        }
    }

    #[test]
    fn speaker_from_attribute_ignores_attribute_order() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let dec = DecoderEda::new(&mut store, "spk", 4, 8, 6, 2, 16, true, true, &mut r).unwrap();
        let aa = normal(&mut r, &[5, 6], 1.0);
        let perm = [4, 2, 0, 1, 3];
        let mut g = Graph::new();
        let a1 = g.constant(aa.clone());
        let a2 = g.constant(aa.select_rows(&perm));
        let s1 = dec.speakers(&mut g, &store, a1, 3).unwrap();
        let s2 = dec.speakers(&mut g, &store, a2, 3).unwrap();
        assert_eq!(g.shape(s1.attractors), &[3, 8]);
        assert_eq!(g.value(s1.existence_logits).len(), 3);
        assert!(g.value(s1.attractors).max_abs_diff(g.value(s2.attractors)) <= tol::PERMUTATION);
        assert!(g.value(s1.existence_logits).max_abs_diff(g.value(s2.existence_logits)) <= tol::PERMUTATION);
    }

    #[test]
    fn weighted_conditioning_identity_cases() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let cond = WeightedConditioner::new(&mut store, "cond", 4, &mut r);
        let x = normal(&mut r, &[3, 4], 1.0);
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let zero_a = g.constant(Tensor::zeros(&[2, 4]));
        let out = cond.forward(&mut g, &store, e, e, zero_a).unwrap();
        assert_eq!(g.value(out), &x);
        *store.get_mut(cond.w) = Tensor::zeros(&[4, 4]);
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let a = g.constant(normal(&mut r, &[2, 4], 1.0));
        let out = cond.forward(&mut g, &store, e, e, a).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn weighted_conditioning_by_hand() {
        // E = [[2, 0], [0, 1]], A = [[1, 0]], W = I
        // σ(E Aᵀ) = [σ(2), σ(0)] = [0.8808.., 0.5]
        // Ê = E + [[σ(2), 0], [0.5, 0]] = [[2 + σ(2), 0], [0.5, 1]]
        let mut store = ParamStore::new();
        let cond = WeightedConditioner { w: store.add("w", Tensor::identity(2)) };
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let out = cond.forward(&mut g, &store, e, e, a).unwrap();
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        let want = [2.0 + s2, 0.0, 0.5, 1.0];
        for (x, y) in g.value(out).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_attention_conditioning_cases() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let cond = CrossAttentionConditioner::new(&mut store, "cond", 8, 6, 2, &mut r).unwrap();
        let x = normal(&mut r, &[5, 8], 1.0);
        // single key: every frame receives the same value vector
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let one = g.constant(normal(&mut r, &[1, 6], 1.0));
        let (out, weights) = cond.forward_with_weights(&mut g, &store, e, one).unwrap();
        let delta = g.sub(out, e).unwrap();
        let d = g.value(delta);
        for t in 1..5 {
            for j in 0..8 {
                assert!((d.at(t, j) - d.at(0, j)).abs() < 1e-12);
            }
        }
        // weights sum to one with several keys
        let many = g.constant(normal(&mut r, &[4, 6], 1.0));
        let (_, weights2) = cond.forward_with_weights(&mut g, &store, e, many).unwrap();
        for w in weights.iter().chain(&weights2) {
            for t in 0..5 {
                let s: f64 = g.value(*w).row(t).iter().sum();
                assert!((s - 1.0).abs() < tol::SOFTMAX_SUM);
            }
        }
        // zeroed output projection: identity
        let wo = cond.att.wo.clone();
        *store.get_mut(wo.w) = Tensor::zeros(&[8, 8]);
        *store.get_mut(wo.b.unwrap()) = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let m = g.constant(normal(&mut r, &[4, 6], 1.0));
        let out = cond.forward(&mut g, &store, e, m).unwrap();
        assert_eq!(g.value(out), &x);
    }
}

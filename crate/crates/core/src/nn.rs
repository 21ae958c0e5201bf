//! Parameterised layers built from graph primitives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tol::LAYER_NORM_EPS;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, din, dout));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b) }
    }

    pub fn no_bias<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, din, dout));
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

/// Position-wise two-layer feed-forward network.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, rng),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = match self.act {
            Activation::Relu => g.relu(h),
            Activation::Swish => g.swish(h),
        };
        let h = g.dropout(h, dropout);
        self.l2.forward(g, store, h)
    }
}

/// Output of an attention call, with per-head weight matrices kept for
/// inspection.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention. Queries have width `dim`;
/// keys and values come from a memory of width `kv_dim`. The output has
/// width `dim`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        causal: bool,
        dropout: f64,
    ) -> Result<Attention> {
        let q = self.wq.forward(g, store, queries)?;
        let dh = self.dim / self.heads;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.wk.forward(g, store, memory)?;
        let v = self.wv.forward(g, store, memory)?;
        let causal_mask = |i: usize, j: usize| j <= i;
        let mask: Option<&dyn Fn(usize, usize) -> bool> = if causal { Some(&causal_mask) } else { None };
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_t(qh, kh)?;
            let p = g.softmax_masked(s, mask);
            weights.push(p);
            let p = g.dropout(p, dropout);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let out = self.wo.forward(g, store, cat)?;
        Ok(Attention { out, weights })
    }
}

/// Single-layer LSTM with hidden width `hidden`. Gate order in the
/// stacked weight columns is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.wx"), din, 4 * hidden, rng),
            wh: Linear::no_bias(store, &format!("{name}.wh"), hidden, 4 * hidden, rng),
            hidden,
        }
    }

    /// Input projections `x·Wx + b` for a whole sequence at once.
    pub fn project_inputs(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        self.wx.forward(g, store, xs)
    }

    /// One cell update from precomputed input gates (`1×4H`).
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x_gates: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = g.param(store, self.wh.w);
        let rec = g.matmul(h, wh)?;
        let gates = g.add(x_gates, rec)?;
        lstm_cell(g, gates, c, self.hidden)
    }

    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        (h, c)
    }
}

/// LSTM state update from pre-activation gates `[i | f | g | o]`:
/// `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`.
pub fn lstm_cell(g: &mut Graph, gates: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = g.slice_cols(gates, 0, hidden)?;
    let f = g.slice_cols(gates, hidden, hidden)?;
    let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Learned query slots, one row per slot.
pub fn query_table<R: Rng>(store: &mut ParamStore, name: &str, slots: usize, dim: usize, rng: &mut R) -> ParamId {
    store.add(format!("{name}.queries"), normal(rng, &[slots, dim], 1.0))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, weighted_sum};
    use crate::tol;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(normal(&mut rng, &[6, 8], 1.0));
        let att = mha.forward(&mut g, &store, x, x, false, 0.0).unwrap();
        for w in att.weights {
            for r in 0..6 {
                let s: f64 = g.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < tol::SOFTMAX_SUM);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn lstm_cell_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let lstm = Lstm::new(&mut store, "l", 3, 4, &mut rng);
            let xs = normal(&mut rng, &[3, 3], 1.0);
            let rep = check(
                &[xs],
                &store,
                |g, st, v| {
                    let proj = lstm.project_inputs(g, st, v[0])?;
                    let (mut h, mut c) = lstm.zero_state(g);
                    for t in 0..3 {
                        let row = g.slice_rows(proj, t, 1)?;
                        (h, c) = lstm.cell(g, st, row, h, c)?;
                    }
                    let both = g.concat_cols(&[h, c])?;
                    weighted_sum(g, both, &mut ChaCha8Rng::seed_from_u64(99))
                },
                16,
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_err < tol::GRAD_REL_ERR, "{rep:?}");
        }
    }

    #[test]
    fn attention_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "a", 4, 6, 2, &mut rng).unwrap();
            let q = normal(&mut rng, &[3, 4], 1.0);
            let m = normal(&mut rng, &[5, 6], 1.0);
            let rep = check(
                &[q, m],
                &store,
                |g, st, v| {
                    let a = mha.forward(g, st, v[0], v[1], seed % 2 == 0, 0.0)?;
                    weighted_sum(g, a.out, &mut ChaCha8Rng::seed_from_u64(7))
                },
                16,
                &mut rng,
            )
            .unwrap();
            assert!(rep.max_rel_err < tol::GRAD_REL_ERR, "{rep:?}");
        }
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node whose
//! inputs always precede it, so the tape order is already a topological
//! order. [`Graph::backward`] walks the tape once in reverse. Graphs are
//! rebuilt for every forward pass, which keeps variable sequence lengths and
//! variable attractor counts trivial to support.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    DepthwiseConv { x: Var, w: Var },
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    BceProb { y: Var, target: Vec<f64> },
    BceLogits { x: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Posteriors are clamped to this interval before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Graph {
    /// Inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode graph; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node holding a stored parameter; repeated requests for the same
    /// parameter return the same node, so shared weights accumulate a
    /// single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Adds a length-`C` bias to every row of an `R×C` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `x · σ(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x), &[x])
    }

    /// Gated linear unit over columns: `a ⊙ σ(b)` where `[a | b]` are the
    /// two column halves of `x`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c % 2 != 0 {
            return Err(Error::dim("glu", self.shape(x), &[2]));
        }
        let h = c / 2;
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * h);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            out.extend((0..h).map(|j| row[j] * sigmoid(row[h + j])));
        }
        let value = Tensor::new(vec![r, h], out)?;
        Ok(self.push(value, Op::Glu(x), &[x]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax where `mask[i][j] == false` excludes entry `(i, j)`
    /// (probability exactly zero). Fully-masked rows come out all-zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&dyn Fn(usize, usize) -> bool>) -> Var {
        let (r, c) = self.dims(x);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        if mask.is_none() {
            for (row, o) in d.chunks(c).zip(out.chunks_mut(c)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in o.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                o.iter_mut().for_each(|v| *v *= inv);
            }
            let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
            return self.push(value, Op::Softmax(x), &[x]);
        }
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let o = &mut out[i * c..(i + 1) * c];
            let keep = |j: usize| mask.map_or(true, |m| m(i, j));
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Per-row normalisation followed by the affine map `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-channel convolution along time with zero "same" padding.
    /// `x` is `T×C`, `w` is `K×C` with odd `K`; tap `k` reads frame
    /// `t + k − K/2`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let (k, wc) = self.dims(w);
        if wc != c || k % 2 == 0 {
            return Err(Error::dim("depthwise_conv1d", self.shape(x), self.shape(w)));
        }
        let half = (k / 2) as isize;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let o = &mut out[ti * c..(ti + 1) * c];
            for kk in 0..k {
                let src = ti as isize + kk as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = &xd[src as usize * c..(src as usize + 1) * c];
                let wr = &wd[kk * c..(kk + 1) * c];
                for j in 0..c {
                    o[j] += wr[j] * xr[j];
                }
            }
        }
        let value = Tensor::new(vec![t, c], out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, w }, &[x, w]))
    }

    /// Inverted dropout; the identity outside training mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let cut = (keep * 4_294_967_296.0) as u64;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if (self.rng.next_u32() as u64) < cut { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    // ---------------------------------------------------------------- structure

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.dims(xs[0]).0;
        let mut total = 0;
        for &x in xs {
            if self.dims(x).0 != r {
                return Err(Error::dim("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            total += self.dims(x).1;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.dims(x).1;
                out.extend_from_slice(&self.data(x)[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.dims(xs[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, cc) = self.dims(x);
            if cc != c {
                return Err(Error::dim("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            out.extend_from_slice(self.data(x));
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let r = self.dims(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", self.shape(x), &[bad]));
        }
        let value = self.value(x).select_rows(idx);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------- reductions and losses

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy between probabilities `y` (clamped to
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]`) and constant targets.
    pub fn bce_prob(&mut self, y: Var, target: &Tensor) -> Result<Var> {
        if self.shape(y) != target.shape() {
            return Err(Error::dim("bce_prob", self.shape(y), target.shape()));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .data(y)
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| bce_prob_term(p, t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceProb {
                y,
                target: target.data().to_vec(),
            },
            &[y],
        ))
    }

    /// Mean binary cross-entropy computed from logits (stable form).
    pub fn bce_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(Error::dim("bce_logits", self.shape(x), target.shape()));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from the scalar `loss`. A graph supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let da = slot(grads, *a, ar * ac);
                    if *ta {
                        gemm(k, n, m, bd, *tb, g, true, 1.0, da);
                    } else {
                        gemm(m, n, k, g, false, bd, !*tb, 1.0, da);
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, br * bc);
                    if *tb {
                        gemm(n, m, k, g, true, ad, *ta, 1.0, db);
                    } else {
                        gemm(k, m, n, ad, !*ta, g, false, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| axpy(d, g, *s)),
            Op::AddScalar(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let c = self.value(*bias).len();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::Swish(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xd) {
                        let s = sigmoid(v);
                        *d += g * (s + v * s * (1.0 - s));
                    }
                })
            }
            Op::Glu(x) => {
                let (r, c) = self.dims(*x);
                let h = c / 2;
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let dr = &mut d[i * c..(i + 1) * c];
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            let gj = g[i * h + j];
                            dr[j] += gj * s;
                            dr[h + j] += gj * row[j] * s * (1.0 - s);
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.dims(*x);
                let gd = self.data(*gamma);
                self.acc(grads, *x, |d| {
                    let mut dyh = vec![0.0; c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dyh[j] = gr[j] * gd[j];
                        }
                        let m1 = dyh.iter().sum::<f64>() / c as f64;
                        let m2 = dyh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dr = &mut d[i * c..(i + 1) * c];
                        for j in 0..c {
                            dr[j] += rstd[i] * (dyh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for gr in g.chunks(c) {
                        axpy(d, gr, 1.0);
                    }
                });
            }
            Op::DepthwiseConv { x, w } => {
                let (t, c) = self.dims(*x);
                let k = self.dims(*w).0;
                let half = (k / 2) as isize;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let taps = |f: &mut dyn FnMut(usize, usize)| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - half;
                            if src >= 0 && src < t as isize {
                                f(ti, kk);
                            }
                        }
                    }
                };
                self.acc(grads, *x, |d| {
                    taps(&mut |ti, kk| {
                        let src = ti + kk - half as usize;
                        for j in 0..c {
                            d[src * c + j] += wd[kk * c + j] * g[ti * c + j];
                        }
                    })
                });
                self.acc(grads, *w, |d| {
                    taps(&mut |ti, kk| {
                        let src = ti + kk - half as usize;
                        for j in 0..c {
                            d[kk * c + j] += xd[src * c + j] * g[ti * c + j];
                        }
                    })
                });
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::SliceCols { x, start } => {
                let c = self.dims(*x).1;
                let len = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        axpy(&mut d[i * c + start..i * c + start + len], gr, 1.0);
                    }
                })
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let c = self.dims(x).1;
                    self.acc(grads, x, |d| {
                        for (i, dr) in d.chunks_mut(c).enumerate() {
                            axpy(dr, &g[i * total + off..i * total + off + c], 1.0);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |d| axpy(&mut d[start * c..start * c + g.len()], g, 1.0))
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc(grads, x, |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |d| {
                    for (k, &src) in idx.iter().enumerate() {
                        axpy(&mut d[src * c..(src + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                })
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::BceProb { y, target } => {
                let n = target.len().max(1) as f64;
                let yd = self.data(*y);
                self.acc(grads, *y, |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(yd).zip(target) {
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            *d += g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n;
                        }
                    }
                })
            }
            Op::BceLogits { x, target } => {
                let n = target.len().max(1) as f64;
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &z), &t) in d.iter_mut().zip(xd).zip(target) {
                        *d += g[0] * (sigmoid(z) - t) / n;
                    }
                })
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).len();
        f(slot(grads, v, n));
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(d: &mut [f64], x: &[f64], a: f64) {
    for (d, x) in d.iter_mut().zip(x) {
        *d += a * x;
    }
}

/// Logistic function, branching on sign so neither tail overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_prob_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    /// Interior gradients are freed during the backward pass.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(d) => Tensor::new(g.shape(v).to_vec(), d.clone()).expect("grad shape"),
            None => Tensor::zeros(g.shape(v)),
        }
    }

    /// Raw gradient buffer for a parameter, if it was touched.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|v| self.grads[v.0].as_deref())
    }

    /// Adds this pass's parameter gradients into `acc`, indexed like the
    /// store.
    pub fn accumulate(&self, store: &ParamStore, acc: &mut [Vec<f64>], weight: f64) {
        for id in store.ids() {
            if let Some(d) = self.param(id) {
                axpy(&mut acc[id.index()], d, weight);
            }
        }
    }
}

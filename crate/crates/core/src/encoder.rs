//! Frame encoder: input projection followed by `L` transformer or
//! conformer blocks, with a conditioning hook between blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Transformer,
    Conformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub block_kind: BlockKind,
    pub conv_kernel: usize,
    pub dropout: f64,
    /// Adds sinusoidal positions to the projected input. Off by default.
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 345,
            layers: 4,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            block_kind: BlockKind::Transformer,
            conv_kernel: 7,
            dropout: 0.1,
            positional_encoding: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("encoder needs layers, d_model and heads ≥ 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// Linear map from stacked features to the model width, then layer norm.
#[derive(Debug, Clone)]
pub struct InputProjection {
    pub linear: Linear,
    pub norm: LayerNorm,
}

impl InputProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, din: usize, d: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "enc.0.proj", din, d, rng),
            norm: LayerNorm::new(store, "enc.0.norm", d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, store, x)?;
        self.norm.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN x)`, then `x + FFN(LN x)`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_att: LayerNorm,
    pub att: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln_att: LayerNorm::new(store, &format!("{name}.att_norm"), d),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), d, d, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, Activation::Relu, rng),
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln_att.forward(g, store, x)?;
        let a = self.att.forward(g, store, h, h, false, self.dropout)?.out;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h, self.dropout)?;
        let f = g.dropout(f, self.dropout);
        g.add(x, f)
    }
}

/// Convolution module: pointwise conv + GLU, depthwise conv, swish,
/// pointwise conv.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw1: Linear,
    pub dw: ParamId,
    pub dw_bias: ParamId,
    pub pw2: Linear,
}

impl ConvModule {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            pw1: Linear::new(store, &format!("{name}.pw1"), d, 2 * d, rng),
            dw: store.add(format!("{name}.dw.w"), xavier(rng, kernel, d)),
            dw_bias: store.add(format!("{name}.dw.b"), Tensor::zeros(&[d])),
            pw2: Linear::new(store, &format!("{name}.pw2"), d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.pw1.forward(g, store, h)?;
        let h = g.glu(h)?;
        let w = g.param(store, self.dw);
        let h = g.depthwise_conv1d(h, w)?;
        let b = g.param(store, self.dw_bias);
        let h = g.add_row(h, b)?;
        let h = g.swish(h);
        let h = self.pw2.forward(g, store, h)?;
        Ok(g.dropout(h, dropout))
    }
}

/// Macaron conformer block: `½FFN → MHSA → Conv → ½FFN → LN`, each
/// sublayer residual.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ln_ff1: LayerNorm,
    pub ff1: FeedForward,
    pub ln_att: LayerNorm,
    pub att: MultiHeadAttention,
    pub conv: ConvModule,
    pub ln_ff2: LayerNorm,
    pub ff2: FeedForward,
    pub ln_out: LayerNorm,
    pub dropout: f64,
}

impl ConformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln_ff1: LayerNorm::new(store, &format!("{name}.ff1_norm"), d),
            ff1: FeedForward::new(store, &format!("{name}.ff1"), d, cfg.ff_dim, Activation::Swish, rng),
            ln_att: LayerNorm::new(store, &format!("{name}.att_norm"), d),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), d, d, cfg.heads, rng)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), d, cfg.conv_kernel, rng),
            ln_ff2: LayerNorm::new(store, &format!("{name}.ff2_norm"), d),
            ff2: FeedForward::new(store, &format!("{name}.ff2"), d, cfg.ff_dim, Activation::Swish, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.out_norm"), d),
            dropout: cfg.dropout,
        })
    }

    fn half_ff(&self, g: &mut Graph, store: &ParamStore, x: Var, ln: &LayerNorm, ff: &FeedForward) -> Result<Var> {
        let h = ln.forward(g, store, x)?;
        let h = ff.forward(g, store, h, self.dropout)?;
        let h = g.dropout(h, self.dropout);
        let h = g.scale(h, 0.5);
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = self.half_ff(g, store, x, &self.ln_ff1, &self.ff1)?;
        let h = self.ln_att.forward(g, store, x)?;
        let a = self.att.forward(g, store, h, h, false, self.dropout)?.out;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let c = self.conv.forward(g, store, x, self.dropout)?;
        let x = g.add(x, c)?;
        let x = self.half_ff(g, store, x, &self.ln_ff2, &self.ff2)?;
        self.ln_out.forward(g, store, x)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Transformer(TransformerBlock),
    Conformer(ConformerBlock),
}

impl Block {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Block::Transformer(b) => b.forward(g, store, x),
            Block::Conformer(b) => b.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input: InputProjection,
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = InputProjection::new(store, cfg.input_dim, cfg.d_model, rng);
        let blocks = (1..=cfg.layers)
            .map(|l| {
                let name = format!("enc.{l}");
                Ok(match cfg.block_kind {
                    BlockKind::Transformer => Block::Transformer(TransformerBlock::new(store, &name, cfg, rng)?),
                    BlockKind::Conformer => Block::Conformer(ConformerBlock::new(store, &name, cfg, rng)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input,
            blocks,
        })
    }

    /// Layer-0 embeddings from `T×input_dim` features.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let x0 = self.input.forward(g, store, features)?;
        if !self.cfg.positional_encoding {
            return Ok(x0);
        }
        let (t, d) = g.value(x0).dims2();
        let pe = g.constant(sinusoid_positions(t, d));
        g.add(x0, pe)
    }

    /// Runs every block. After each block except the last, `hook(g, l, E_l)`
    /// returns the conditioned embeddings fed to block `l + 1`. Returns
    /// `E_1..E_L` (block outputs before conditioning).
    pub fn encode<F>(&self, g: &mut Graph, store: &ParamStore, x0: Var, mut hook: F) -> Result<Vec<Var>>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
    {
        let n = self.blocks.len();
        let mut out = Vec::with_capacity(n);
        let mut x = x0;
        for (i, block) in self.blocks.iter().enumerate() {
            let e = block.forward(g, store, x)?;
            out.push(e);
            x = if i + 1 < n { hook(g, i + 1, e)? } else { e };
        }
        Ok(out)
    }
}

pub fn sinusoid_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape")
}

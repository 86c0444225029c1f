//! Layer kinds used by the prediction network, plus a pre-norm transformer block.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Stride-1 convolution over `[B, C, H, W]`.
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
    },
    FullyConnected { in_features: usize, out_features: usize },
    ReLU,
    Sigmoid,
    GlobalAvgPool2D,
    LayerNorm { features: usize, eps: f64 },
    MultiHeadSelfAttention { d_model: usize, heads: usize },
    Softmax,
}

impl LayerSpec {
    /// 3x3, zero padding 1, channel preserving.
    pub fn conv3x3(channels: usize) -> Self {
        LayerSpec::Conv2D {
            in_channels: channels,
            out_channels: channels,
            kernel: (3, 3),
            padding: (1, 1),
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec::FullyConnected { in_features, out_features }
    }

    pub fn layer_norm(features: usize) -> Self {
        LayerSpec::LayerNorm { features, eps: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::InvalidLayer(msg));
        match *self {
            LayerSpec::Conv2D { in_channels, out_channels, kernel, .. } => {
                if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return bad(format!("conv2d needs positive channels and kernel, got {self:?}"));
                }
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad(format!("fully connected needs positive features, got {self:?}"));
                }
            }
            LayerSpec::LayerNorm { features, eps } => {
                if features == 0 || eps <= 0.0 {
                    return bad(format!("layer norm needs features > 0 and eps > 0, got {self:?}"));
                }
            }
            LayerSpec::MultiHeadSelfAttention { d_model, heads } => {
                if heads == 0 || d_model == 0 || d_model % heads != 0 {
                    return bad(format!("d_model {d_model} is not divisible by {heads} heads"));
                }
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid | LayerSpec::GlobalAvgPool2D | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Validates and registers parameters under `prefix`.
    pub fn build<R: Rng>(self, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Layer> {
        self.validate()?;
        let mut params = Vec::new();
        match self {
            LayerSpec::Conv2D { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel.0 * kernel.1;
                let fan_out = out_channels * kernel.0 * kernel.1;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.push(store.insert_uniform(
                    format!("{prefix}.weight"),
                    &[out_channels, in_channels, kernel.0, kernel.1],
                    bound,
                    rng,
                )?);
                params.push(store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?);
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                let bound = (6.0 / (in_features + out_features) as f64).sqrt();
                params.push(store.insert_uniform(format!("{prefix}.weight"), &[in_features, out_features], bound, rng)?);
                params.push(store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_features]))?);
            }
            LayerSpec::LayerNorm { features, .. } => {
                params.push(store.insert(format!("{prefix}.gain"), Tensor::filled(&[features], 1.0))?);
                params.push(store.insert(format!("{prefix}.bias"), Tensor::zeros(&[features]))?);
            }
            LayerSpec::MultiHeadSelfAttention { d_model, .. } => {
                let bound = (6.0 / (2 * d_model) as f64).sqrt();
                // No key bias: it shifts every score in a row equally and cancels in the softmax.
                for p in ["query", "key", "value", "out"] {
                    params.push(store.insert_uniform(format!("{prefix}.{p}.weight"), &[d_model, d_model], bound, rng)?);
                    if p != "key" {
                        params.push(store.insert(format!("{prefix}.{p}.bias"), Tensor::zeros(&[d_model]))?);
                    }
                }
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid | LayerSpec::GlobalAvgPool2D | LayerSpec::Softmax => {}
        }
        Ok(Layer { spec: self, params })
    }
}

/// A [`LayerSpec`] bound to its parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<ParamId>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match self.spec {
            LayerSpec::Conv2D { in_channels, padding, .. } => {
                let s = tape.shape(x);
                if s.len() != 4 || s[1] != in_channels {
                    return shape_err("Conv2D", format!("[B, {in_channels}, H, W]"), s);
                }
                let w = tape.param(store, self.params[0]);
                let b = tape.param(store, self.params[1]);
                tape.conv2d(x, w, Some(b), padding)
            }
            LayerSpec::FullyConnected { .. } => {
                let w = tape.param(store, self.params[0]);
                let b = tape.param(store, self.params[1]);
                tape.linear(x, w, Some(b))
            }
            LayerSpec::ReLU => Ok(tape.relu(x)),
            LayerSpec::Sigmoid => Ok(tape.sigmoid(x)),
            LayerSpec::Softmax => Ok(tape.softmax(x)),
            LayerSpec::GlobalAvgPool2D => tape.global_avg_pool2d(x),
            LayerSpec::LayerNorm { eps, .. } => {
                let g = tape.param(store, self.params[0]);
                let b = tape.param(store, self.params[1]);
                tape.layer_norm(x, g, b, eps)
            }
            LayerSpec::MultiHeadSelfAttention { d_model, heads } => self.attention(tape, store, x, d_model, heads),
        }
    }

    /// `x: [B, T, D]` -> `[B, T, D]`, bidirectional scaled dot-product attention.
    fn attention(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, d: usize, heads: usize) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != d {
            return shape_err("MultiHeadSelfAttention", format!("[B, T, {d}]"), &s);
        }
        let (b, t, dh) = (s[0], s[1], d / heads);
        // params: query.w, query.b, key.w, value.w, value.b, out.w, out.b
        let proj = |tape: &mut Tape, w: usize, bias_idx: Option<usize>| -> Result<NodeId> {
            let w = tape.param(store, self.params[w]);
            let bias = bias_idx.map(|i| tape.param(store, self.params[i]));
            let y = tape.linear(x, w, bias)?;
            let y = tape.reshape(y, &[b, t, heads, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = proj(tape, 0, Some(1))?;
        let k = proj(tape, 2, None)?;
        let v = proj(tape, 3, Some(4))?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores);
        let ctx = tape.bmm(att, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let wo = tape.param(store, self.params[5]);
        let bo = tape.param(store, self.params[6]);
        tape.linear(ctx, wo, Some(bo))
    }
}

/// Pre-norm transformer block:
/// `x + Attn(LN1(x))`, then `h + FF2(ReLU(FF1(LN2(h))))`.
///
/// Parameter names under `prefix`: `ln1.*`, `attn.*`, `ln2.*`, `mlp.fc1.*`, `mlp.fc2.*`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: Layer,
    attn: Layer,
    ln2: Layer,
    fc1: Layer,
    fc2: Layer,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize, ff_width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln1: LayerSpec::layer_norm(d_model).build(store, &format!("{prefix}.ln1"), rng)?,
            attn: LayerSpec::MultiHeadSelfAttention { d_model, heads }.build(store, &format!("{prefix}.attn"), rng)?,
            ln2: LayerSpec::layer_norm(d_model).build(store, &format!("{prefix}.ln2"), rng)?,
            fc1: LayerSpec::fc(d_model, ff_width).build(store, &format!("{prefix}.mlp.fc1"), rng)?,
            fc2: LayerSpec::fc(ff_width, d_model).build(store, &format!("{prefix}.mlp.fc2"), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

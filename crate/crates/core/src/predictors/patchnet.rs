use amc_nn::{Layer, LayerSpec, NodeId, ParamStore, Tape, Tensor, TransformerBlock};
use rand::Rng;

use super::config::ModelConfig;
use super::num_patches;
use crate::error::{Error, Result};

/// One SINR-attention iteration: two 3x3 convolutions with the patches as
/// channels, squeeze-and-excitation gating, and a residual connection.
#[derive(Clone, Debug)]
struct SaBlock {
    conv1: Layer,
    conv2: Layer,
    fc1: Layer,
    fc2: Layer,
}

/// Sinusoidal position table `[positions, d]`.
pub fn positional_encoding(positions: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; positions * d];
    for pos in 0..positions {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            pe[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[positions, d], pe).expect("positive dims")
}

/// Patching, SINR attention, embedding, transformer backbone and output head.
#[derive(Clone, Debug)]
pub struct PatchNet {
    history: usize,
    subcarriers: usize,
    patch: usize,
    patches: usize,
    d_model: usize,
    sa: Vec<SaBlock>,
    embed: Layer,
    pe: Tensor,
    backbone: Vec<TransformerBlock>,
    head1: Layer,
    head2: Layer,
}

impl PatchNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, history: usize, subcarriers: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if history == 0 || subcarriers == 0 {
            return Err(Error::Config("history and subcarriers must be at least 1".into()));
        }
        let lp = num_patches(history, cfg.patch);
        let se_hidden = (lp / cfg.se_reduction).max(1);
        let sa = (0..cfg.sa_iterations)
            .map(|i| {
                Ok(SaBlock {
                    conv1: LayerSpec::conv3x3(lp).build(store, &format!("sa.{i}.conv1"), rng)?,
                    conv2: LayerSpec::conv3x3(lp).build(store, &format!("sa.{i}.conv2"), rng)?,
                    fc1: LayerSpec::fc(lp, se_hidden).build(store, &format!("sa.{i}.se.fc1"), rng)?,
                    fc2: LayerSpec::fc(se_hidden, lp).build(store, &format!("sa.{i}.se.fc2"), rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let d = cfg.d_model;
        let embed = LayerSpec::fc(cfg.patch * subcarriers, d).build(store, "embed", rng)?;
        let backbone = if cfg.has_backbone() {
            (0..cfg.layers)
                .map(|i| TransformerBlock::new(store, &format!("backbone.{i}"), d, cfg.heads, cfg.ff_width, rng))
                .collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        let head1 = LayerSpec::fc(lp * d, d).build(store, "head.fc1", rng)?;
        let head2 = LayerSpec::fc(d, subcarriers).build(store, "head.fc2", rng)?;
        Ok(Self {
            history,
            subcarriers,
            patch: cfg.patch,
            patches: lp,
            d_model: d,
            sa,
            embed,
            pe: positional_encoding(lp, d),
            backbone,
            head1,
            head2,
        })
    }

    /// `[L', N, K]` per sample.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.patches, self.patch, self.subcarriers]
    }

    pub fn history(&self) -> usize {
        self.history
    }

    /// `x: [B, L', N, K]` through every attention iteration. Also returns each
    /// iteration's channel weights `[B, L']`.
    pub fn sinr_attention(&self, tape: &mut Tape, store: &ParamStore, mut x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut gates = Vec::with_capacity(self.sa.len());
        for blk in &self.sa {
            let f = blk.conv1.forward(tape, store, x)?;
            let f = tape.relu(f);
            let f = blk.conv2.forward(tape, store, f)?;
            let g = tape.global_avg_pool2d(f)?;
            let g = blk.fc1.forward(tape, store, g)?;
            let g = tape.relu(g);
            let g = blk.fc2.forward(tape, store, g)?;
            let g = tape.sigmoid(g);
            gates.push(g);
            let scaled = tape.mul_prefix(f, g)?;
            x = tape.add(scaled, x)?;
        }
        Ok((x, gates))
    }

    /// `[B, L', N, K]` -> `[B, L', d]` with positions added.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let b = tape.shape(x)[0];
        let x = tape.reshape(x, &[b, self.patches, self.patch * self.subcarriers])?;
        let e = self.embed.forward(tape, store, x)?;
        let pe = tape.input(self.pe.clone());
        Ok(tape.add_suffix(e, pe)?)
    }

    pub fn backbone(&self, tape: &mut Tape, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for blk in &self.backbone {
            x = blk.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// `[B, L', d]` -> normalized `[B, K]`.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let b = tape.shape(x)[0];
        let x = tape.reshape(x, &[b, self.patches * self.d_model])?;
        let h = self.head1.forward(tape, store, x)?;
        let h = tape.relu(h);
        Ok(self.head2.forward(tape, store, h)?)
    }

    /// Normalized patched input to normalized output.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape() {
            return Err(Error::Shape { expected: format!("[B, {:?}]", self.input_shape()), got: format!("{s:?}") });
        }
        let (x, _) = self.sinr_attention(tape, store, x)?;
        let x = self.embed(tape, store, x)?;
        let x = self.backbone(tape, store, x)?;
        self.head(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_table() {
        let pe = positional_encoding(3, 6);
        let d = pe.data();
        for j in 0..6 {
            assert_eq!(d[j], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((d[6] - 1f64.sin()).abs() < 1e-15);
        assert!((d[6] - 0.8415).abs() < 1e-4);
    }
}

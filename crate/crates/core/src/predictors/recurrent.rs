use amc_nn::{Layer, LayerSpec, NodeId, ParamId, ParamStore, Tape, Tensor};
use rand::Rng;

use super::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Cell {
    /// `x W + b`, all gates side by side.
    input: Layer,
    /// `h U`, no bias.
    hidden: ParamId,
}

/// Stacked Elman, LSTM or GRU cells over the history rows, then a linear
/// read-out of the top layer's final state.
///
/// Gate order is `[r, z, n]` for GRU and `[i, f, g, o]` for LSTM.
#[derive(Clone, Debug)]
pub struct RecurrentNet {
    kind: ModelKind,
    history: usize,
    subcarriers: usize,
    hidden: usize,
    cells: Vec<Cell>,
    out: Layer,
}

fn gates(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Gru => 3,
        ModelKind::Lstm => 4,
        _ => 1,
    }
}

impl RecurrentNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, history: usize, subcarriers: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == ModelKind::PatchNet {
            return Err(Error::Config("RecurrentNet needs rnn, lstm or gru".into()));
        }
        let h = cfg.rnn_hidden;
        let g = gates(cfg.kind);
        let cells = (0..cfg.rnn_layers)
            .map(|l| {
                let input_width = if l == 0 { subcarriers } else { h };
                let input = LayerSpec::fc(input_width, g * h).build(store, &format!("rnn.{l}.input"), rng)?;
                let bound = (6.0 / (h + g * h) as f64).sqrt();
                let hidden = store.insert_uniform(format!("rnn.{l}.hidden.weight"), &[h, g * h], bound, rng)?;
                Ok(Cell { input, hidden })
            })
            .collect::<Result<_>>()?;
        let out = LayerSpec::fc(h, subcarriers).build(store, "out", rng)?;
        Ok(Self { kind: cfg.kind, history, subcarriers, hidden: h, cells, out })
    }

    pub fn history(&self) -> usize {
        self.history
    }

    /// Normalized `[B, L, K]` to normalized `[B, K]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.history || s[2] != self.subcarriers {
            return Err(Error::Shape { expected: format!("[B, {}, {}]", self.history, self.subcarriers), got: format!("{s:?}") });
        }
        let b = s[0];
        let hd = self.hidden;
        let mut h: Vec<Option<NodeId>> = vec![None; self.cells.len()];
        let mut c: Vec<Option<NodeId>> = vec![None; self.cells.len()];
        for t in 0..self.history {
            let mut inp = tape.select(x, 1, t)?;
            for (l, cell) in self.cells.iter().enumerate() {
                let mut pre = cell.input.forward(tape, store, inp)?;
                let hu = match h[l] {
                    Some(prev) => {
                        let u = tape.param(store, cell.hidden);
                        Some(tape.linear(prev, u, None)?)
                    }
                    None => None,
                };
                let next = match self.kind {
                    ModelKind::Gru => {
                        let xr = tape.slice_last(pre, 0, hd)?;
                        let xz = tape.slice_last(pre, hd, hd)?;
                        let xn = tape.slice_last(pre, 2 * hd, hd)?;
                        match (hu, h[l]) {
                            (Some(hu), Some(prev)) => {
                                let hr = tape.slice_last(hu, 0, hd)?;
                                let hz = tape.slice_last(hu, hd, hd)?;
                                let hn = tape.slice_last(hu, 2 * hd, hd)?;
                                let r = tape.add(xr, hr)?;
                                let r = tape.sigmoid(r);
                                let z = tape.add(xz, hz)?;
                                let z = tape.sigmoid(z);
                                let rn = tape.mul(r, hn)?;
                                let n = tape.add(xn, rn)?;
                                let n = tape.tanh(n);
                                // h' = n + z (h - n)
                                let diff = tape.sub(prev, n)?;
                                let zd = tape.mul(z, diff)?;
                                tape.add(n, zd)?
                            }
                            _ => {
                                // h = 0: h' = (1 - z) n
                                let z = tape.sigmoid(xz);
                                let n = tape.tanh(xn);
                                let omz = tape.affine(z, -1.0, 1.0);
                                tape.mul(omz, n)?
                            }
                        }
                    }
                    ModelKind::Lstm => {
                        if let Some(hu) = hu {
                            pre = tape.add(pre, hu)?;
                        }
                        let i = tape.slice_last(pre, 0, hd)?;
                        let i = tape.sigmoid(i);
                        let f = tape.slice_last(pre, hd, hd)?;
                        let f = tape.sigmoid(f);
                        let g = tape.slice_last(pre, 2 * hd, hd)?;
                        let g = tape.tanh(g);
                        let o = tape.slice_last(pre, 3 * hd, hd)?;
                        let o = tape.sigmoid(o);
                        let ig = tape.mul(i, g)?;
                        let cn = match c[l] {
                            Some(prev) => {
                                let fc = tape.mul(f, prev)?;
                                tape.add(fc, ig)?
                            }
                            None => ig,
                        };
                        c[l] = Some(cn);
                        let tc = tape.tanh(cn);
                        tape.mul(o, tc)?
                    }
                    _ => {
                        if let Some(hu) = hu {
                            pre = tape.add(pre, hu)?;
                        }
                        tape.tanh(pre)
                    }
                };
                h[l] = Some(next);
                inp = next;
            }
        }
        let top = match h.last().copied().flatten() {
            Some(top) => top,
            None => tape.input(Tensor::zeros(&[b, hd])),
        };
        Ok(self.out.forward(tape, store, top)?)
    }
}

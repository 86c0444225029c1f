//! SINR forecasters: shared preprocessing, the NMSE metric, the last-value
//! baseline and the trainable networks.

mod config;
mod network;
mod patchnet;
mod recurrent;

pub use config::{BackboneKind, FreezePolicy, ModelConfig, ModelKind};
pub use network::{NeuralPredictor, ParamReport, PreparedBatch};
pub use patchnet::{positional_encoding, PatchNet};
pub use recurrent::RecurrentNet;

use crate::error::{Error, Result};
use crate::units::to_lin;

/// Version of the normalization convention stored in checkpoints.
pub const NORM_VERSION: u32 = 1;
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Lower clamp for NMSE reported in dB.
pub const NMSE_FLOOR_DB: f64 = -100.0;

/// Normalized `L x K` window with the statistics needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorInput {
    pub history: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub mu: f64,
    pub sigma: f64,
}

/// `(x - mu) / sigma` over the whole window, population standard deviation
/// floored at [`SIGMA_FLOOR`].
pub fn normalize(history: &[f64], rows: usize, cols: usize) -> Result<PredictorInput> {
    if rows == 0 || cols == 0 || history.len() != rows * cols {
        return Err(Error::Shape { expected: format!("{rows}x{cols} history"), got: format!("{} values", history.len()) });
    }
    let n = history.len() as f64;
    let mu = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt().max(SIGMA_FLOOR);
    Ok(PredictorInput { history: history.iter().map(|v| (v - mu) / sigma).collect(), rows, cols, mu, sigma })
}

pub fn denormalize(x: &[f64], mu: f64, sigma: f64) -> Vec<f64> {
    x.iter().map(|v| v * sigma + mu).collect()
}

/// Number of patches, `ceil(L / N)`.
pub fn num_patches(history: usize, patch: usize) -> usize {
    history.div_ceil(patch)
}

/// Splits `L x K` into `L' x N x K` blocks, zero-padding the last one.
pub fn patchify(x: &[f64], history: usize, cols: usize, patch: usize) -> Result<(usize, Vec<f64>)> {
    if patch == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    if x.len() != history * cols {
        return Err(Error::Shape { expected: format!("{history}x{cols}"), got: format!("{} values", x.len()) });
    }
    let lp = num_patches(history, patch);
    let mut out = vec![0.0; lp * patch * cols];
    out[..x.len()].copy_from_slice(x);
    Ok((lp, out))
}

/// Forecast for one report, in dB.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub sinr_db: Vec<f64>,
}

impl Prediction {
    pub fn linear(&self) -> Vec<f64> {
        to_lin(&self.sinr_db)
    }
}

/// `||pred - truth||^2 / ||truth||^2`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape { expected: format!("{} values", truth.len()), got: format!("{} values", pred.len()) });
    }
    let energy: f64 = truth.iter().map(|t| t * t).sum();
    if energy == 0.0 {
        return Err(Error::Invalid("NMSE undefined for an all-zero truth vector".into()));
    }
    let err: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(err / energy)
}

pub fn nmse_db(ratio: f64) -> f64 {
    (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
}

/// Mean of per-sample NMSE over rows of length `k`.
pub fn mean_nmse(pred: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    if pred.len() != truth.len() || k == 0 || !truth.len().is_multiple_of(k) || truth.is_empty() {
        return Err(Error::Shape { expected: format!("{} values in rows of {k}", truth.len()), got: format!("{} values", pred.len()) });
    }
    let mut acc = 0.0;
    for (p, t) in pred.chunks(k).zip(truth.chunks(k)) {
        acc += nmse(p, t)?;
    }
    Ok(acc / (truth.len() / k) as f64)
}

/// `sum ||pred - truth||^2 / sum ||truth||^2` over all rows.
pub fn pooled_nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    nmse(pred, truth)
}

/// `B` histories of `L x K` dB values, contiguous.
#[derive(Clone, Copy, Debug)]
pub struct HistoryBatch<'a> {
    pub data: &'a [f64],
    pub batch: usize,
    pub history: usize,
    pub subcarriers: usize,
}

impl<'a> HistoryBatch<'a> {
    pub fn new(data: &'a [f64], history: usize, subcarriers: usize) -> Result<Self> {
        let per = history * subcarriers;
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(Error::Shape { expected: format!("multiple of {history}x{subcarriers}"), got: format!("{} values", data.len()) });
        }
        Ok(Self { data, batch: data.len() / per, history, subcarriers })
    }

    pub fn sample(&self, i: usize) -> &'a [f64] {
        let per = self.history * self.subcarriers;
        &self.data[i * per..(i + 1) * per]
    }

    pub fn last_row(&self, i: usize) -> &'a [f64] {
        let s = self.sample(i);
        &s[s.len() - self.subcarriers..]
    }
}

/// A forecaster from `L x K` dB history to a `K`-vector in dB.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;

    /// `(L, K)` the predictor was built for, or `None` if it accepts any.
    fn window(&self) -> Option<(usize, usize)>;

    /// Row-major `B x K` predictions.
    fn predict_batch(&self, batch: HistoryBatch<'_>) -> Result<Vec<f64>>;

    fn predict(&self, history: &[f64], rows: usize, cols: usize) -> Result<Prediction> {
        let sinr_db = self.predict_batch(HistoryBatch::new(history, rows, cols)?)?;
        Ok(Prediction { sinr_db })
    }

    fn check_window(&self, batch: &HistoryBatch<'_>) -> Result<()> {
        match self.window() {
            Some((l, k)) if (l, k) != (batch.history, batch.subcarriers) => Err(Error::Shape {
                expected: format!("L={l}, K={k}"),
                got: format!("L={}, K={}", batch.history, batch.subcarriers),
            }),
            _ => Ok(()),
        }
    }
}

/// No prediction: the last measurement is the forecast.
#[derive(Clone, Copy, Debug, Default)]
pub struct LastValue;

impl Predictor for LastValue {
    fn name(&self) -> &str {
        "np"
    }

    fn window(&self) -> Option<(usize, usize)> {
        None
    }

    fn predict_batch(&self, batch: HistoryBatch<'_>) -> Result<Vec<f64>> {
        Ok((0..batch.batch).flat_map(|i| batch.last_row(i).iter().copied()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let p = normalize(&[5.0; 6], 2, 3).unwrap();
        assert!(p.history.iter().all(|&v| v == 0.0));
        assert_eq!(p.sigma, SIGMA_FLOOR);
        let p = normalize(&[1.0, 3.0], 1, 2).unwrap();
        assert_eq!((p.mu, p.sigma), (2.0, 1.0));
        assert_eq!(p.history, vec![-1.0, 1.0]);
        let x = [3.5, -2.0, 7.25, 0.1];
        let p = normalize(&x, 2, 2).unwrap();
        for (a, b) in denormalize(&p.history, p.mu, p.sigma).iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn patchify_examples() {
        let x: Vec<f64> = (0..16 * 2).map(f64::from).collect();
        let (lp, p) = patchify(&x, 16, 2, 4).unwrap();
        assert_eq!((lp, p.len()), (4, 32));
        assert_eq!(p, x);
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let (lp, p) = patchify(&x, 10, 1, 4).unwrap();
        assert_eq!(lp, 3);
        assert_eq!(&p[10..], &[0.0, 0.0]);
        assert_eq!(patchify(&x, 10, 1, 10).unwrap().0, 1);
    }

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(nmse_db(0.0), NMSE_FLOOR_DB);
        assert_eq!(nmse(&[0.0, 0.0], &[1.0, -2.0]).unwrap(), 1.0);
        assert_eq!(nmse(&[3.0, 4.0], &[0.0, 4.0]).unwrap(), 9.0 / 16.0);
        assert!(nmse(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn last_value_returns_final_row() {
        let h = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = LastValue.predict(&h, 3, 2).unwrap();
        assert_eq!(p.sinr_db, vec![5.0, 6.0]);
    }
}

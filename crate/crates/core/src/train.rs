//! Adam training on batch-mean NMSE with measurement-noise augmentation.

use std::io::Write;

use amc_nn::{adam_step, AdamState, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::predictors::{mean_nmse, nmse_db, pooled_nmse, HistoryBatch, NeuralPredictor, Predictor};
use crate::units::{db_to_lin, to_db};

/// Pairs in dB, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub history: usize,
    pub subcarriers: usize,
    /// `n x L x K`
    pub histories: Vec<f64>,
    /// `n x K`
    pub targets: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl PairSet {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut histories = Vec::with_capacity(ds.len() * ds.window.history * ds.subcarriers);
        let mut targets = Vec::with_capacity(ds.len() * ds.subcarriers);
        for s in &ds.samples {
            histories.extend(to_db(&s.history));
            targets.extend(to_db(&s.target));
        }
        Self {
            history: ds.window.history,
            subcarriers: ds.subcarriers,
            histories,
            targets,
            velocities: ds.samples.iter().map(|s| s.velocity_kmh).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn batch(&self) -> Result<HistoryBatch<'_>> {
        HistoryBatch::new(&self.histories, self.history, self.subcarriers)
    }

    /// Gathers `(histories, targets)` for the given sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (hl, k) = (self.history * self.subcarriers, self.subcarriers);
        let mut h = Vec::with_capacity(idx.len() * hl);
        let mut t = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            h.extend_from_slice(&self.histories[i * hl..(i + 1) * hl]);
            t.extend_from_slice(&self.targets[i * k..(i + 1) * k]);
        }
        (h, t)
    }

    /// Copy with every history sample perturbed by Gaussian noise at `snr_db`
    /// relative to that sample's dB variance.
    pub fn with_noise(&self, snr_db: f64, seed: u64) -> PairSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let hl = self.history * self.subcarriers;
        for chunk in out.histories.chunks_mut(hl) {
            add_noise(chunk, snr_db, &mut rng);
        }
        out
    }
}

/// Adds zero-mean Gaussian noise with variance `var(x) / 10^(snr_db/10)`.
pub fn add_noise<R: Rng>(x: &mut [f64], snr_db: f64, rng: &mut R) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if let Ok(dist) = Normal::new(0.0, (var / db_to_lin(snr_db)).sqrt()) {
        x.iter_mut().for_each(|v| *v += dist.sample(rng));
    }
}

/// How per-sample errors are combined into the batch loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean of per-sample NMSE.
    SampleMean,
    /// Total squared error over total target energy in the batch.
    Pooled,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample-mean" => Ok(LossKind::SampleMean),
            "pooled" => Ok(LossKind::Pooled),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected sample-mean or pooled)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::SampleMean => "sample-mean",
            LossKind::Pooled => "pooled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Per-sample measurement-noise SNR range in dB; `None` disables augmentation.
    pub noise_snr_db: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { loss: LossKind::Pooled, batch_size: 64, epochs: 50, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 1, noise_snr_db: Some((15.0, 25.0)) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if let Some((lo, hi)) = self.noise_snr_db {
            if !(lo <= hi) {
                return Err(Error::Config(format!("noise SNR range {lo}:{hi} has low > high")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss (linear NMSE).
    pub train_nmse: f64,
    pub val_nmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStats>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_nmse: Option<f64>,
}

impl TrainOutcome {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_nmse_db,val_nmse_db")?;
        for e in &self.curve {
            writeln!(w, "{},{:.6},{:.6}", e.epoch, nmse_db(e.train_nmse), nmse_db(e.val_nmse))?;
        }
        Ok(())
    }
}

/// Batch NMSE recorded on `tape`: `mean_i ||pred_i - t_i||^2 / ||t_i||^2`
/// or, pooled, `sum_i ||pred_i - t_i||^2 / sum_i ||t_i||^2`.
pub fn nmse_loss(tape: &mut Tape, pred: amc_nn::NodeId, targets: &[f64], k: usize, kind: LossKind) -> Result<amc_nn::NodeId> {
    let b = targets.len() / k;
    let energies: Vec<f64> = targets.chunks(k).map(|t| t.iter().map(|v| v * v).sum()).collect();
    let total: f64 = energies.iter().sum();
    if energies.contains(&0.0) && kind == LossKind::SampleMean || total == 0.0 {
        return Err(Error::Invalid("NMSE undefined for an all-zero target".into()));
    }
    let inv: Vec<f64> = match kind {
        LossKind::SampleMean => energies.iter().map(|e| 1.0 / (e * b as f64)).collect(),
        LossKind::Pooled => vec![1.0 / total; b],
    };
    let tgt = tape.input(Tensor::new(&[b, k], targets.to_vec())?);
    let d = tape.sub(pred, tgt)?;
    let sq = tape.mul(d, d)?;
    let per = tape.sum_last(sq);
    let w = tape.input(Tensor::from_vec(inv));
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted))
}

/// One Adam step on a batch; returns the loss before the update.
pub fn train_step(model: &mut NeuralPredictor, state: &mut AdamState, histories: &[f64], targets: &[f64], loss: LossKind) -> Result<f64> {
    let batch = HistoryBatch::new(histories, model.history(), model.subcarriers())?;
    let prepared = model.prepare(batch)?;
    let mut tape = Tape::new();
    let x = tape.input(prepared.x);
    let pred = model.forward(&mut tape, model.store(), x, &prepared.mu, &prepared.sigma)?;
    let loss = nmse_loss(&mut tape, pred, targets, model.subcarriers(), loss)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let store: &mut ParamStore = model.store_mut();
    store.zero_grad();
    tape.backward(loss, store)?;
    adam_step(store, state)?;
    Ok(value)
}

/// Held-out NMSE of a predictor, both ways.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmseStats {
    /// Total squared error over total target energy.
    pub pooled: f64,
    /// Mean of per-sample NMSE.
    pub sample_mean: f64,
}

pub fn nmse_stats(model: &dyn Predictor, set: &PairSet) -> Result<NmseStats> {
    let pred = model.predict_batch(set.batch()?)?;
    Ok(NmseStats { pooled: pooled_nmse(&pred, &set.targets)?, sample_mean: mean_nmse(&pred, &set.targets, set.subcarriers)? })
}

/// Validation metric used for model selection, matching the configured loss.
pub fn evaluate_nmse(model: &dyn Predictor, set: &PairSet, kind: LossKind) -> Result<f64> {
    let s = nmse_stats(model, set)?;
    Ok(match kind {
        LossKind::SampleMean => s.sample_mean,
        LossKind::Pooled => s.pooled,
    })
}

/// Trains in place and restores the parameters of the best validation epoch.
pub fn train(model: &mut NeuralPredictor, train_set: &PairSet, val_set: &PairSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (name, set) in [("training", train_set), ("validation", val_set)] {
        if (set.history, set.subcarriers) != (model.history(), model.subcarriers()) {
            return Err(Error::Shape {
                expected: format!("L={}, K={}", model.history(), model.subcarriers()),
                got: format!("{name} set L={}, K={}", set.history, set.subcarriers),
            });
        }
    }
    let mut state = AdamState::with_hyper(model.store(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut outcome = TrainOutcome::default();
    let mut best: Option<ParamStore> = None;
    let hl = train_set.history * train_set.subcarriers;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut h, t) = train_set.gather(idx);
            if let Some((lo, hi)) = cfg.noise_snr_db {
                for chunk in h.chunks_mut(hl) {
                    let snr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                    add_noise(chunk, snr, &mut rng);
                }
            }
            let loss = train_step(model, &mut state, &h, &t, cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let val = if val_set.is_empty() { f64::NAN } else { evaluate_nmse(model, val_set, cfg.loss)? };
        let train_nmse = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        outcome.curve.push(EpochStats { epoch, train_nmse, val_nmse: val });
        log::debug!("epoch={epoch} train_nmse_db={:.3} val_nmse_db={:.3}", nmse_db(train_nmse), nmse_db(val));
        let improved = match outcome.best_val_nmse {
            None => true,
            Some(b) => val < b,
        };
        if improved || val_set.is_empty() {
            outcome.best_epoch = epoch;
            outcome.best_val_nmse = Some(val);
            best = Some(model.store().clone());
        }
    }
    if let Some(best) = best {
        model.store_mut().copy_values_from(&best)?;
    }
    Ok(outcome)
}

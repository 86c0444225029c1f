//! The closed AMC loop: periodic reports, feedback delay, zero-order hold.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::{SinrTrace, Window};
use crate::error::{Error, Result};
use crate::linkmap::{bler, LinkConfig, McsEntry};
use crate::predictors::{nmse, HistoryBatch, Predictor};
use crate::units::{db_to_lin, lin_to_db};

/// Measurement period, feedback delay and history length, in TTIs.
pub type TimingConfig = Window;

/// Source of the SINR forecast behind each report.
#[derive(Clone, Copy)]
pub enum Forecaster<'a> {
    Model(&'a dyn Predictor),
    /// The true snapshot `T_d` TTIs ahead.
    Genie,
}

impl Forecaster<'_> {
    pub fn name(&self) -> &str {
        match self {
            Forecaster::Model(p) => p.name(),
            Forecaster::Genie => "genie",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkRecord {
    pub tti: usize,
    pub cqi: u8,
    pub mcs: McsEntry,
    pub s_eff_db_true: f64,
    /// 0 when nothing was sent.
    pub bler: f64,
    pub block_error: bool,
    pub bits: f64,
}

/// One report: forecast vs. the truth at its target TTI.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub tti: usize,
    pub cqi: u8,
    pub nmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkRun {
    pub records: Vec<LinkRecord>,
    pub reports: Vec<Report>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// AWGN on measured dB values; noise variance is the trace's dB variance
    /// divided by this SNR (linear).
    pub measurement_snr_db: Option<f64>,
}

/// Report instants `t_n = n T_m` with a full history, applied from `t_n + T_d`
/// until the next report lands. Warm-up TTIs are not recorded.
pub fn run_link(trace: &SinrTrace, forecaster: Forecaster<'_>, timing: &TimingConfig, link: &LinkConfig, seed: u64) -> Result<LinkRun> {
    run_link_with(trace, forecaster, timing, link, seed, &RunOptions::default())
}

pub fn run_link_with(
    trace: &SinrTrace,
    forecaster: Forecaster<'_>,
    timing: &TimingConfig,
    link: &LinkConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<LinkRun> {
    timing.validate()?;
    trace.validate()?;
    if trace.steps < timing.span() {
        return Err(Error::TraceTooShort { needed: timing.span(), have: trace.steps });
    }
    let (tm, td, l, k) = (timing.measurement_period, timing.feedback_delay, timing.history, trace.subcarriers);
    let true_db: Vec<f64> = trace.values.iter().map(|&v| lin_to_db(v)).collect();
    let measured = match opts.measurement_snr_db {
        Some(snr) => add_measurement_noise(&true_db, snr, seed),
        None => true_db.clone(),
    };
    let row = |v: &[f64], t: usize| -> Vec<f64> { v[t * k..(t + 1) * k].to_vec() };

    let first = (l - 1) * tm;
    let instants: Vec<usize> = (first..trace.steps - td).step_by(tm).collect();
    let forecasts: Vec<f64> = match forecaster {
        Forecaster::Genie => instants.iter().flat_map(|&t| row(&true_db, t + td)).collect(),
        Forecaster::Model(p) => {
            let mut hist = Vec::with_capacity(instants.len() * l * k);
            for &t in &instants {
                for i in 0..l {
                    hist.extend(row(&measured, t + i * tm - first));
                }
            }
            p.predict_batch(HistoryBatch::new(&hist, l, k)?)?
        }
    };
    if forecasts.len() != instants.len() * k {
        return Err(Error::Shape { expected: format!("{} forecasts", instants.len() * k), got: format!("{} values", forecasts.len()) });
    }

    let mut reports = Vec::with_capacity(instants.len());
    for (n, &t) in instants.iter().enumerate() {
        let f = &forecasts[n * k..(n + 1) * k];
        let lin: Vec<f64> = f.iter().map(|&d| db_to_lin(d)).collect();
        let cqi = link.select_cqi(&lin)?;
        reports.push(Report { tti: t, cqi, nmse: nmse(f, &row(&true_db, t + td))? });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trace.steps - first - td);
    for t in first + td..trace.steps {
        // Common random numbers: one draw per TTI whatever the decision.
        let u: f64 = rng.gen();
        let cqi = reports[((t - first - td) / tm).min(reports.len() - 1)].cqi;
        let mcs = link.mcs(cqi);
        let s_eff = link.effective_sinr_db(trace.row(t), cqi)?;
        let (p, err) = if mcs.transmits() {
            let p = bler(cqi, s_eff, &link.bler);
            (p, u < p)
        } else {
            (0.0, false)
        };
        let bits = if mcs.transmits() && !err { link.block_bits(cqi) } else { 0.0 };
        records.push(LinkRecord { tti: t, cqi, mcs, s_eff_db_true: s_eff, bler: p, block_error: err, bits });
    }
    Ok(LinkRun { records, reports })
}

fn add_measurement_noise(db: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
    let n = db.len() as f64;
    let mean = db.iter().sum::<f64>() / n;
    let var = db.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = (var / db_to_lin(snr_db)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_655f_6d65);
    match Normal::new(0.0, std) {
        Ok(dist) => db.iter().map(|v| v + dist.sample(&mut rng)).collect(),
        Err(_) => db.to_vec(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkStats {
    pub records: usize,
    pub transmissions: usize,
    /// Mean model BLER over transmitting TTIs; `None` if nothing was sent.
    pub mean_bler: Option<f64>,
    /// Fraction of transmitted blocks that failed.
    pub block_error_rate: Option<f64>,
    pub no_tx_fraction: f64,
    /// Delivered bits over elapsed time.
    pub realized_bps: f64,
    /// Mean of `(1 - bler) Q R re / tti`.
    pub expected_bps: f64,
}

pub fn link_stats(records: &[LinkRecord], link: &LinkConfig) -> Result<LinkStats> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot summarize zero link records".into()));
    }
    let n = records.len() as f64;
    let tx: Vec<&LinkRecord> = records.iter().filter(|r| r.mcs.transmits()).collect();
    let ntx = tx.len();
    let mean_bler = (ntx > 0).then(|| tx.iter().map(|r| r.bler).sum::<f64>() / ntx as f64);
    let block_error_rate = (ntx > 0).then(|| tx.iter().filter(|r| r.block_error).count() as f64 / ntx as f64);
    let bits: f64 = records.iter().map(|r| r.bits).sum();
    let expected: f64 = tx.iter().map(|r| crate::linkmap::throughput(r.bler, r.mcs, link.re_per_tti, link.tti_s)).sum();
    Ok(LinkStats {
        records: records.len(),
        transmissions: ntx,
        mean_bler,
        block_error_rate,
        no_tx_fraction: (records.len() - ntx) as f64 / n,
        realized_bps: bits / (n * link.tti_s),
        expected_bps: expected / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkSummary {
    pub overall: LinkStats,
    /// In order of first appearance.
    pub groups: Vec<(String, LinkStats)>,
}

/// Overall and per-group statistics. `keys[i]` labels `records[i]`.
pub fn summarize(records: &[LinkRecord], keys: &[String], link: &LinkConfig) -> Result<LinkSummary> {
    if keys.len() != records.len() {
        return Err(Error::Shape { expected: format!("{} group keys", records.len()), got: format!("{}", keys.len()) });
    }
    let overall = link_stats(records, link)?;
    let mut order: Vec<&String> = Vec::new();
    for k in keys {
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let groups = order
        .into_iter()
        .map(|key| {
            let subset: Vec<LinkRecord> = records.iter().zip(keys).filter(|(_, k)| *k == key).map(|(r, _)| *r).collect();
            Ok((key.clone(), link_stats(&subset, link)?))
        })
        .collect::<Result<_>>()?;
    Ok(LinkSummary { overall, groups })
}

pub const RECORD_CSV_HEADER: &str = "tti,cqi,Q,R,s_eff_db_true,bler,block_error,bits";

pub fn write_records_csv<W: Write>(mut w: W, records: &[LinkRecord]) -> std::io::Result<()> {
    writeln!(w, "{RECORD_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.6},{:.4},{:.6},{},{:.1}",
            r.tti,
            r.cqi,
            r.mcs.q,
            r.mcs.r,
            r.s_eff_db_true,
            r.bler,
            u8::from(r.block_error),
            r.bits
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_trace, ChannelConfig};
    use crate::predictors::LastValue;

    fn trace(velocity: f64, steps: usize, seed: u64) -> SinrTrace {
        generate_trace(&ChannelConfig { velocity_kmh: velocity, seed, ..Default::default() }, steps).unwrap()
    }

    #[test]
    fn schedule_and_warmup() {
        let tr = trace(60.0, 40, 1);
        let t = TimingConfig::default();
        let run = run_link(&tr, Forecaster::Genie, &t, &LinkConfig::default(), 5).unwrap();
        // first report at 30, applied from 32
        assert_eq!(run.records.first().unwrap().tti, 32);
        assert_eq!(run.records.len(), 8);
        assert_eq!(run.reports.iter().map(|r| r.tti).collect::<Vec<_>>(), vec![30, 32, 34, 36]);
        for r in &run.records {
            assert_eq!(r.cqi, run.reports[(r.tti - 32) / 2].cqi);
            if r.block_error || r.cqi == 0 {
                assert_eq!(r.bits, 0.0);
            }
        }
    }

    #[test]
    fn too_short_trace() {
        let tr = trace(60.0, 33, 1);
        let err = run_link(&tr, Forecaster::Genie, &TimingConfig::default(), &LinkConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::TraceTooShort { needed: 34, have: 33 }));
    }

    #[test]
    fn static_channel_np_equals_genie() {
        let tr = trace(0.0, 80, 4);
        let t = TimingConfig::default();
        let link = LinkConfig::default();
        let a = run_link(&tr, Forecaster::Genie, &t, &link, 9).unwrap();
        let b = run_link(&tr, Forecaster::Model(&LastValue), &t, &link, 9).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn zero_delay_np_equals_genie() {
        let tr = trace(100.0, 80, 2);
        let t = TimingConfig { feedback_delay: 0, ..Default::default() };
        let link = LinkConfig::default();
        let a = run_link(&tr, Forecaster::Genie, &t, &link, 1).unwrap();
        let b = run_link(&tr, Forecaster::Model(&LastValue), &t, &link, 1).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn summary_edge_cases() {
        let link = LinkConfig::default();
        let mcs = McsEntry { q: 2, r: 0.5 };
        let ok = LinkRecord { tti: 0, cqi: 3, mcs, s_eff_db_true: 30.0, bler: 0.0, block_error: false, bits: 336.0 };
        let s = link_stats(&[ok; 4], &link).unwrap();
        assert!((s.realized_bps - 672_000.0).abs() < 1e-6);
        assert!((s.expected_bps - 672_000.0).abs() < 1e-6);
        let none = LinkRecord { cqi: 0, mcs: McsEntry::NONE, bits: 0.0, ..ok };
        let s = link_stats(&[none; 3], &link).unwrap();
        assert_eq!((s.realized_bps, s.no_tx_fraction, s.mean_bler), (0.0, 1.0, None));
        assert!(link_stats(&[], &link).is_err());
        let keys = vec!["a".to_string(), "b".to_string()];
        let g = summarize(&[ok, none], &keys, &link).unwrap();
        assert_eq!(g.groups.len(), 2);
        assert_eq!(g.groups[1].1.no_tx_fraction, 1.0);
    }
}

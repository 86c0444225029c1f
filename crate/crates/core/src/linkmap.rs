//! Effective SINR, CQI quantization, MCS lookup, BLER curves and throughput.

use crate::error::{Error, Result};
use crate::units::lin_to_db;

pub const NUM_CQI: usize = 15;

/// Modulation order and code rate. `q == 0` marks "no transmission".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McsEntry {
    pub q: u8,
    pub r: f64,
}

impl McsEntry {
    pub const NONE: McsEntry = McsEntry { q: 0, r: 0.0 };

    pub fn spectral_efficiency(&self) -> f64 {
        self.q as f64 * self.r
    }

    pub fn transmits(&self) -> bool {
        self.q != 0
    }

    pub fn modulation(&self) -> &'static str {
        match self.q {
            2 => "QPSK",
            4 => "16QAM",
            6 => "64QAM",
            8 => "256QAM",
            _ => "none",
        }
    }
}

/// CQI 1..=15 to MCS.
#[derive(Clone, Debug, PartialEq)]
pub struct CqiTable {
    entries: [McsEntry; NUM_CQI],
}

/// `(Q, rate x 1024)` rows of 3GPP TS 38.214 Table 5.2.2.1-2.
pub const NR_TABLE_2: [(u8, u16); NUM_CQI] = [
    (2, 78),
    (2, 193),
    (2, 449),
    (4, 378),
    (4, 490),
    (4, 616),
    (6, 466),
    (6, 567),
    (6, 666),
    (6, 772),
    (6, 873),
    (8, 711),
    (8, 797),
    (8, 885),
    (8, 948),
];

impl CqiTable {
    pub fn new(entries: [McsEntry; NUM_CQI]) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if ![2, 4, 6, 8].contains(&e.q) || !(e.r > 0.0 && e.r <= 1.0) {
                return Err(Error::Config(format!("CQI {}: Q={} R={} out of range", i + 1, e.q, e.r)));
            }
        }
        if let Some(i) = (1..NUM_CQI).find(|&i| entries[i].spectral_efficiency() <= entries[i - 1].spectral_efficiency()) {
            return Err(Error::Config(format!("CQI table spectral efficiency not increasing at CQI {}", i + 1)));
        }
        Ok(Self { entries })
    }

    pub fn from_rate_x1024(rows: &[(u8, u16); NUM_CQI]) -> Result<Self> {
        Self::new(rows.map(|(q, r)| McsEntry { q, r: r as f64 / 1024.0 }))
    }

    pub fn nr_table2() -> Self {
        Self::from_rate_x1024(&NR_TABLE_2).expect("built-in table is valid")
    }

    pub fn entries(&self) -> &[McsEntry; NUM_CQI] {
        &self.entries
    }
}

impl Default for CqiTable {
    fn default() -> Self {
        Self::nr_table2()
    }
}

/// Table lookup; CQI 0 (or anything above 15) is no transmission.
pub fn cqi_to_mcs(cqi: u8, table: &CqiTable) -> McsEntry {
    match cqi {
        1..=15 => table.entries[cqi as usize - 1],
        _ => McsEntry::NONE,
    }
}

/// Logistic BLER curves, one per CQI.
#[derive(Clone, Debug, PartialEq)]
pub struct BlerModel {
    pub midpoints_db: [f64; NUM_CQI],
    pub slopes: [f64; NUM_CQI],
}

impl BlerModel {
    pub fn new(midpoints_db: [f64; NUM_CQI], slopes: [f64; NUM_CQI]) -> Result<Self> {
        let m = Self { midpoints_db, slopes };
        m.validate()?;
        Ok(m)
    }

    /// `m_c = -7 + 2.1 (c - 1)` dB, `k_c = 2` per dB, every CQI.
    pub fn uniform_spacing() -> Self {
        // Rounded to 0.1 dB so the values equal their decimal spelling in config files.
        Self { midpoints_db: std::array::from_fn(|i| ((-70.0 + 21.0 * i as f64).round()) / 10.0), slopes: [2.0; NUM_CQI] }
    }

    /// Uniform spacing through CQI 11, then gaps of 0.7, 2.1, 2.1 and 0.5 dB.
    ///
    /// On the 256QAM rows the spectral-efficiency steps (about 7-9%) are too
    /// small for a 2.1 dB midpoint gap: just past a threshold the lower entry
    /// would deliver more bits, so the threshold rule would disagree with the
    /// throughput-optimal choice. The narrower gaps restore agreement.
    pub fn nr_default() -> Self {
        let mut m = Self::uniform_spacing();
        let gaps = [0.7, 2.1, 2.1, 0.5];
        for (i, g) in gaps.iter().enumerate() {
            m.midpoints_db[11 + i] = ((m.midpoints_db[10 + i] + g) * 10.0).round() / 10.0;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.midpoints_db.iter().chain(&self.slopes).any(|v| !v.is_finite()) {
            return Err(Error::Config("BLER model has non-finite parameters".into()));
        }
        if let Some(i) = (1..NUM_CQI).find(|&i| self.midpoints_db[i] <= self.midpoints_db[i - 1]) {
            return Err(Error::Config(format!("BLER midpoints must increase (CQI {})", i + 1)));
        }
        if let Some(i) = (0..NUM_CQI).find(|&i| self.slopes[i] <= 0.0) {
            return Err(Error::Config(format!("BLER slope for CQI {} must be positive", i + 1)));
        }
        Ok(())
    }
}

impl Default for BlerModel {
    fn default() -> Self {
        Self::nr_default()
    }
}

/// BLER of `cqi` (1..=15) at effective SINR `s_eff_db`.
pub fn bler(cqi: u8, s_eff_db: f64, model: &BlerModel) -> f64 {
    assert!((1..=15).contains(&cqi), "bler is defined for CQI 1..=15, got {cqi}");
    let i = cqi as usize - 1;
    amc_nn::sigmoid(-model.slopes[i] * (s_eff_db - model.midpoints_db[i])).clamp(0.0, 1.0)
}

/// Minimum effective SINR (dB) per CQI meeting the BLER target.
#[derive(Clone, Debug, PartialEq)]
pub struct CqiThresholds(pub [f64; NUM_CQI]);

impl CqiThresholds {
    pub fn get(&self, cqi: u8) -> f64 {
        self.0[cqi as usize - 1]
    }
}

pub fn calibrate_thresholds(model: &BlerModel, target_bler: f64) -> Result<CqiThresholds> {
    if !(target_bler > 0.0 && target_bler < 1.0) {
        return Err(Error::Config(format!("target BLER must lie in (0, 1), got {target_bler}")));
    }
    let offset = ((1.0 - target_bler) / target_bler).ln();
    let thr: [f64; NUM_CQI] = std::array::from_fn(|i| model.midpoints_db[i] + offset / model.slopes[i]);
    if let Some(i) = (1..NUM_CQI).find(|&i| thr[i] <= thr[i - 1]) {
        return Err(Error::Config(format!(
            "calibrated thresholds not increasing at CQI {} ({:.3} <= {:.3} dB)",
            i + 1,
            thr[i],
            thr[i - 1]
        )));
    }
    Ok(CqiThresholds(thr))
}

/// Largest CQI whose threshold is at or below `s_eff_db`, or 0.
pub fn sinr_to_cqi(s_eff_db: f64, thresholds: &CqiThresholds) -> u8 {
    thresholds.0.iter().take_while(|&&t| t <= s_eff_db).count() as u8
}

/// Exponential effective SINR mapping, linear in and out.
///
/// Evaluated as `-beta * (logsumexp(-s / beta) - ln K)` so extreme SINR
/// ratios neither overflow nor underflow.
pub fn eesm(sinrs: &[f64], beta: f64) -> Result<f64> {
    if sinrs.is_empty() {
        return Err(Error::Invalid("eesm of an empty SINR vector".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Invalid(format!("eesm beta must be positive, got {beta}")));
    }
    if let Some(s) = sinrs.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Invalid(format!("eesm input {s} is not a positive finite SINR")));
    }
    let min = sinrs.iter().copied().fold(f64::INFINITY, f64::min);
    let acc: f64 = sinrs.iter().map(|&s| (-(s - min) / beta).exp()).sum();
    let lse = -min / beta + acc.ln();
    let s_eff = -beta * (lse - (sinrs.len() as f64).ln());
    // Rounding can push the result a hair outside [min, max].
    let max = sinrs.iter().copied().fold(0.0, f64::max);
    Ok(s_eff.clamp(min, max))
}

/// Bits per second delivered at block error rate `bler`.
pub fn throughput(bler: f64, mcs: McsEntry, re_per_tti: f64, tti_s: f64) -> f64 {
    (1.0 - bler) * mcs.spectral_efficiency() * re_per_tti / tti_s
}

/// Everything needed to turn a SINR vector into a decision and an outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkConfig {
    pub table: CqiTable,
    pub bler: BlerModel,
    pub target_bler: f64,
    pub beta: f64,
    pub beta_per_cqi: Option<[f64; NUM_CQI]>,
    pub re_per_tti: f64,
    pub tti_s: f64,
    thresholds: CqiThresholds,
}

impl LinkConfig {
    pub fn new(
        table: CqiTable,
        bler: BlerModel,
        target_bler: f64,
        beta: f64,
        beta_per_cqi: Option<[f64; NUM_CQI]>,
        re_per_tti: f64,
        tti_s: f64,
    ) -> Result<Self> {
        bler.validate()?;
        let betas_ok = std::iter::once(beta).chain(beta_per_cqi.iter().flatten().copied()).all(|b| b > 0.0 && b.is_finite());
        if !betas_ok {
            return Err(Error::Config("EESM beta values must be positive".into()));
        }
        if !(re_per_tti >= 0.0 && tti_s > 0.0) {
            return Err(Error::Config("re_per_tti must be >= 0 and tti positive".into()));
        }
        let thresholds = calibrate_thresholds(&bler, target_bler)?;
        Ok(Self { table, bler, target_bler, beta, beta_per_cqi, re_per_tti, tti_s, thresholds })
    }

    pub fn thresholds(&self) -> &CqiThresholds {
        &self.thresholds
    }

    pub fn beta_for(&self, cqi: u8) -> f64 {
        match (self.beta_per_cqi, cqi) {
            (Some(b), 1..=15) => b[cqi as usize - 1],
            _ => self.beta,
        }
    }

    pub fn effective_sinr_db(&self, sinrs: &[f64], cqi: u8) -> Result<f64> {
        Ok(lin_to_db(eesm(sinrs, self.beta_for(cqi))?))
    }

    /// ILLA decision for a linear SINR vector. With per-CQI beta the highest
    /// CQI whose own effective SINR clears its threshold wins.
    pub fn select_cqi(&self, sinrs: &[f64]) -> Result<u8> {
        match self.beta_per_cqi {
            None => Ok(sinr_to_cqi(lin_to_db(eesm(sinrs, self.beta)?), &self.thresholds)),
            Some(_) => {
                for cqi in (1..=NUM_CQI as u8).rev() {
                    if self.effective_sinr_db(sinrs, cqi)? >= self.thresholds.get(cqi) {
                        return Ok(cqi);
                    }
                }
                Ok(0)
            }
        }
    }

    pub fn mcs(&self, cqi: u8) -> McsEntry {
        cqi_to_mcs(cqi, &self.table)
    }

    /// Bits carried by one block at `cqi`.
    pub fn block_bits(&self, cqi: u8) -> f64 {
        self.mcs(cqi).spectral_efficiency() * self.re_per_tti
    }
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self::new(CqiTable::default(), BlerModel::default(), 0.1, 1.0, None, 336.0, 0.5e-3).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eesm_examples() {
        assert!((eesm(&[0.25, 0.25, 0.25], 2.0).unwrap() - 0.25).abs() < 1e-15);
        let v = eesm(&[1.0, 2.0], 1.0).unwrap();
        let exact = -((-1f64).exp() / 2.0 + (-2f64).exp() / 2.0).ln();
        assert!((v - exact).abs() < 1e-12, "{v}");
        assert!((v - 1.3802).abs() < 1e-3);
        assert_eq!(eesm(&[7.5], 0.3).unwrap(), 7.5);
        assert!(eesm(&[], 1.0).is_err());
        assert!(eesm(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn eesm_extreme_ratios_stay_finite() {
        let v = eesm(&[1e-12, 1e9], 1.0).unwrap();
        assert!(v.is_finite() && v >= 1e-12);
        let v = eesm(&[1e6, 2e6], 0.01).unwrap();
        assert!((1e6..=2e6).contains(&v));
    }

    #[test]
    fn cqi_table_rows() {
        let t = CqiTable::nr_table2();
        let top = cqi_to_mcs(15, &t);
        assert_eq!(top.q, 8);
        assert_eq!(top.r, 948.0 / 1024.0);
        assert_eq!(cqi_to_mcs(0, &t), McsEntry::NONE);
        let low = cqi_to_mcs(1, &t).spectral_efficiency();
        assert!((2..=15).all(|c| cqi_to_mcs(c, &t).spectral_efficiency() > low));
    }

    #[test]
    fn table_validation() {
        let mut rows = NR_TABLE_2;
        rows.swap(3, 4);
        assert!(CqiTable::from_rate_x1024(&rows).is_err());
    }

    #[test]
    fn bler_curve_points() {
        let m = BlerModel::default();
        for c in 1..=15u8 {
            let mid = m.midpoints_db[c as usize - 1];
            assert!((bler(c, mid, &m) - 0.5).abs() < 1e-12);
            let k = m.slopes[c as usize - 1];
            assert!((bler(c, mid + 9f64.ln() / k, &m) - 0.1).abs() < 1e-12);
            assert_eq!(bler(c, 1e6, &m), 0.0);
        }
    }

    #[test]
    fn thresholds() {
        let m = BlerModel::default();
        let half = calibrate_thresholds(&m, 0.5).unwrap();
        assert_eq!(half.0, m.midpoints_db);
        let t = calibrate_thresholds(&m, 0.1).unwrap();
        for i in 0..NUM_CQI {
            assert!((t.0[i] - m.midpoints_db[i] - 1.0986).abs() < 1e-4);
        }
        let tight = calibrate_thresholds(&m, 0.01).unwrap();
        assert!((0..NUM_CQI).all(|i| tight.0[i] > t.0[i]));
        assert!(calibrate_thresholds(&m, 0.0).is_err());
        let mut bad = m.clone();
        bad.slopes[4] = 0.2;
        assert!(calibrate_thresholds(&bad, 0.1).is_err());
    }

    #[test]
    fn cqi_quantization() {
        let t = calibrate_thresholds(&BlerModel::default(), 0.1).unwrap();
        assert_eq!(sinr_to_cqi(t.get(1) - 1.0, &t), 0);
        assert_eq!(sinr_to_cqi(60.0, &t), 15);
        assert_eq!(sinr_to_cqi(t.get(7), &t), 7);
    }

    #[test]
    fn throughput_examples() {
        let qpsk_half = McsEntry { q: 2, r: 0.5 };
        assert_eq!(throughput(1.0, qpsk_half, 336.0, 0.5e-3), 0.0);
        assert!((throughput(0.0, qpsk_half, 336.0, 0.5e-3) - 672_000.0).abs() < 1e-6);
        assert_eq!(throughput(0.0, McsEntry::NONE, 336.0, 0.5e-3), 0.0);
    }

    #[test]
    fn per_cqi_beta_selection() {
        let base = LinkConfig::default();
        let same = LinkConfig::new(base.table.clone(), base.bler.clone(), 0.1, 1.0, Some([1.0; NUM_CQI]), 336.0, 0.5e-3).unwrap();
        let s = [3.0, 10.0, 40.0, 2.0];
        assert_eq!(base.select_cqi(&s).unwrap(), same.select_cqi(&s).unwrap());
    }
}

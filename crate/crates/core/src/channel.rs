//! Tapped-delay-line Rayleigh fading with a sum-of-sinusoids Jakes Doppler
//! spectrum, producing per-subcarrier SINR traces.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::units::db_to_lin;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Sinusoids per tap; the Jakes approximation needs at least 32.
pub const MIN_SINUSOIDS: usize = 32;

/// Maximum Doppler shift in Hz for a user moving at `velocity_kmh`.
pub fn doppler_frequency(velocity_kmh: f64, carrier_hz: f64) -> f64 {
    velocity_kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerDelayProfile {
    pub name: String,
    pub delays_s: Vec<f64>,
    pub powers_db: Vec<f64>,
}

impl PowerDelayProfile {
    pub fn new(name: impl Into<String>, delays_s: Vec<f64>, powers_db: Vec<f64>) -> Result<Self> {
        let p = Self { name: name.into(), delays_s, powers_db };
        p.validate()?;
        Ok(p)
    }

    /// Six exponentially decaying taps spread over 1.6 us.
    pub fn uma() -> Self {
        Self {
            name: "uma".into(),
            delays_s: vec![0.0, 100e-9, 200e-9, 400e-9, 800e-9, 1600e-9],
            powers_db: vec![0.0, -2.0, -4.0, -8.0, -12.0, -16.0],
        }
    }

    /// Same tap powers as [`uma`](Self::uma) with halved delays.
    pub fn umi() -> Self {
        let uma = Self::uma();
        Self {
            name: "umi".into(),
            delays_s: uma.delays_s.iter().map(|d| d / 2.0).collect(),
            powers_db: uma.powers_db,
        }
    }

    pub fn flat() -> Self {
        Self { name: "flat".into(), delays_s: vec![0.0], powers_db: vec![0.0] }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "uma" => Ok(Self::uma()),
            "umi" => Ok(Self::umi()),
            "flat" => Ok(Self::flat()),
            other => Err(Error::Config(format!("unknown power-delay profile `{other}` (expected uma, umi or flat)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_s.is_empty() {
            return Err(Error::Config(format!("profile `{}` has no taps", self.name)));
        }
        if self.delays_s.len() != self.powers_db.len() {
            return Err(Error::Config(format!(
                "profile `{}`: {} delays but {} powers",
                self.name,
                self.delays_s.len(),
                self.powers_db.len()
            )));
        }
        if self.delays_s.iter().chain(&self.powers_db).any(|v| !v.is_finite()) || self.delays_s.iter().any(|&d| d < 0.0) {
            return Err(Error::Config(format!("profile `{}` has invalid taps", self.name)));
        }
        Ok(())
    }

    /// Linear tap powers scaled to sum to one.
    pub fn normalized_powers(&self) -> Vec<f64> {
        let lin: Vec<f64> = self.powers_db.iter().map(|&p| db_to_lin(p)).collect();
        let total: f64 = lin.iter().sum();
        lin.iter().map(|p| p / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub subcarriers: usize,
    pub tti_s: f64,
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub velocity_kmh: f64,
    pub profile: PowerDelayProfile,
    /// Mean per-subcarrier SNR is drawn uniformly from this range once per trace.
    pub mean_snr_db: (f64, f64),
    pub sinusoids: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 2.4e9,
            subcarrier_spacing_hz: 15e3,
            subcarriers: 48,
            tti_s: 0.5e-3,
            tx_power_dbm: 40.0,
            noise_dbm: -84.0,
            velocity_kmh: 60.0,
            profile: PowerDelayProfile::uma(),
            mean_snr_db: (0.0, 26.0),
            sinusoids: MIN_SINUSOIDS,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 {
            return Err(Error::Config("subcarrier count must be at least 1".into()));
        }
        if !(self.velocity_kmh >= 0.0 && self.velocity_kmh.is_finite()) {
            return Err(Error::Config(format!("velocity must be non-negative, got {}", self.velocity_kmh)));
        }
        if !(self.tti_s > 0.0 && self.carrier_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::Config("tti, carrier and subcarrier spacing must be positive".into()));
        }
        let (lo, hi) = self.mean_snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("mean SNR range {lo}:{hi} is invalid")));
        }
        if self.sinusoids < MIN_SINUSOIDS {
            return Err(Error::Config(format!("need at least {MIN_SINUSOIDS} sinusoids per tap, got {}", self.sinusoids)));
        }
        self.profile.validate()
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.subcarrier_spacing_hz * self.subcarriers as f64
    }

    pub fn doppler_hz(&self) -> f64 {
        doppler_frequency(self.velocity_kmh, self.carrier_hz)
    }
}

struct Tap {
    amplitude: f64,
    doppler: Vec<f64>,
    phase: Vec<f64>,
    /// `exp(-j 2 pi k df tau)` for every subcarrier `k`.
    rotation: Vec<Complex64>,
}

/// Time-continuous frequency response of one fading realization.
pub struct FadingChannel {
    taps: Vec<Tap>,
    subcarriers: usize,
}

impl FadingChannel {
    /// Draws a realization. Each tap's process uses equally spaced arrival
    /// angles with a random offset and independent random phases.
    pub fn new<R: Rng>(config: &ChannelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fd = config.doppler_hz();
        let m = config.sinusoids;
        let powers = config.profile.normalized_powers();
        let taps = powers
            .iter()
            .zip(&config.profile.delays_s)
            .map(|(&p, &tau)| {
                let theta: f64 = rng.gen_range(0.0..2.0 * PI);
                let doppler = (0..m).map(|n| fd * ((2.0 * PI * n as f64 + theta) / m as f64).cos()).collect();
                let phase = (0..m).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                let rotation = (0..config.subcarriers)
                    .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 * config.subcarrier_spacing_hz * tau))
                    .collect();
                Tap { amplitude: (p / m as f64).sqrt(), doppler, phase, rotation }
            })
            .collect();
        Ok(Self { taps, subcarriers: config.subcarriers })
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    /// Complex gain of tap `l` at time `t`, unit average power before scaling.
    fn tap_gain(tap: &Tap, t: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&f, &phi) in tap.doppler.iter().zip(&tap.phase) {
            acc += Complex64::from_polar(1.0, 2.0 * PI * f * t + phi);
        }
        acc * tap.amplitude
    }

    /// Writes `H_k(t)` for all subcarriers into `out`.
    pub fn response(&self, t: f64, out: &mut [Complex64]) {
        out.iter_mut().for_each(|h| *h = Complex64::new(0.0, 0.0));
        for tap in &self.taps {
            let g = Self::tap_gain(tap, t);
            for (h, r) in out.iter_mut().zip(&tap.rotation) {
                *h += g * r;
            }
        }
    }
}

/// `T x K` linear SINR matrix, row-major by time.
#[derive(Clone, Debug, PartialEq)]
pub struct SinrTrace {
    pub values: Vec<f64>,
    pub steps: usize,
    pub subcarriers: usize,
    pub tti_s: f64,
    pub velocity_kmh: f64,
    pub seed: u64,
    pub profile_name: String,
}

impl SinrTrace {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.subcarriers..(t + 1) * self.subcarriers]
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.subcarriers == 0 || self.values.len() != self.steps * self.subcarriers {
            return Err(Error::Invalid(format!(
                "trace holds {} values for {}x{}",
                self.values.len(),
                self.steps,
                self.subcarriers
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Invalid(format!("trace contains non-positive or non-finite SINR {v}")));
        }
        Ok(())
    }
}

/// Generates `steps` TTIs of per-subcarrier SINR for `config`.
///
/// Values are rounded to 32-bit precision so that trace files store them exactly.
pub fn generate_trace(config: &ChannelConfig, steps: usize) -> Result<SinrTrace> {
    if steps == 0 {
        return Err(Error::Invalid("trace needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    config.validate()?;
    let (lo, hi) = config.mean_snr_db;
    let mean_snr_db = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    // G_ls * P / N lands the mean per-subcarrier SNR on the drawn value.
    let g_ls = db_to_lin(mean_snr_db - (config.tx_power_dbm - config.noise_dbm));
    let p_over_n = db_to_lin(config.tx_power_dbm - config.noise_dbm);
    let fading = FadingChannel::new(config, &mut rng)?;
    let k = config.subcarriers;
    let mut h = vec![Complex64::new(0.0, 0.0); k];
    let mut values = Vec::with_capacity(steps * k);
    for t in 0..steps {
        fading.response(t as f64 * config.tti_s, &mut h);
        for hk in &h {
            // Floor keeps deep fades strictly positive after f32 rounding.
            let s = (g_ls * hk.norm_sqr() * p_over_n).max(1e-30);
            values.push(s as f32 as f64);
        }
    }
    Ok(SinrTrace {
        values,
        steps,
        subcarriers: k,
        tti_s: config.tti_s,
        velocity_kmh: config.velocity_kmh,
        seed: config.seed,
        profile_name: config.profile.name.clone(),
    })
}

/// Sampling protocol for `(history, target)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub history: usize,
    pub measurement_period: usize,
    pub feedback_delay: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self { history: 16, measurement_period: 2, feedback_delay: 2 }
    }
}

impl Window {
    /// Minimum trace length, `L * T_m + T_d`.
    pub fn span(&self) -> usize {
        self.history * self.measurement_period + self.feedback_delay
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.measurement_period == 0 {
            return Err(Error::Config("history length and measurement period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub velocity_kmh: f64,
    /// Seed of the trace the pair was cut from.
    pub seed: u64,
    /// `L x K` linear SINR.
    pub history: Vec<f64>,
    /// `K` linear SINR, `T_d` TTIs after the last history row.
    pub target: Vec<f64>,
}

/// Cuts one pair out of `trace`, with the first history row at `start`.
pub fn sample_from_trace(trace: &SinrTrace, window: &Window, start: usize) -> Result<Sample> {
    window.validate()?;
    let needed = start + window.span();
    if trace.steps < needed {
        return Err(Error::TraceTooShort { needed, have: trace.steps });
    }
    let mut history = Vec::with_capacity(window.history * trace.subcarriers);
    for i in 0..window.history {
        history.extend_from_slice(trace.row(start + i * window.measurement_period));
    }
    let last = start + (window.history - 1) * window.measurement_period;
    Ok(Sample {
        velocity_kmh: trace.velocity_kmh,
        seed: trace.seed,
        history,
        target: trace.row(last + window.feedback_delay).to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Template; its velocity and seed are replaced per sample.
    pub channel: ChannelConfig,
    pub speed_kmh: (f64, f64),
    pub window: Window,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub subcarriers: usize,
    pub window: Window,
    pub tti_s: f64,
    pub speed_kmh: (f64, f64),
    pub seed: u64,
    pub profile_name: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `ceil(fraction * len)` samples, at least one when non-empty.
    pub fn fraction(&self, fraction: f64) -> Dataset {
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(self.len().min(1), self.len());
        Dataset { samples: self.samples[..n].to_vec(), ..self.clone() }
    }
}

/// Draws `count` pairs, each from an independent trace with velocity uniform
/// over `speed_kmh`.
pub fn sample_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.window.validate()?;
    spec.channel.validate()?;
    let (lo, hi) = spec.speed_kmh;
    if !(lo >= 0.0 && lo <= hi) {
        return Err(Error::Config(format!("speed range {lo}:{hi} is invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let velocity_kmh = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let cfg = ChannelConfig { velocity_kmh, seed: rng.gen(), ..spec.channel.clone() };
        let trace = generate_trace(&cfg, spec.window.span())?;
        samples.push(sample_from_trace(&trace, &spec.window, 0)?);
    }
    Ok(Dataset {
        subcarriers: spec.channel.subcarriers,
        window: spec.window,
        tti_s: spec.channel.tti_s,
        speed_kmh: spec.speed_kmh,
        seed: spec.seed,
        profile_name: spec.channel.profile.name.clone(),
        samples,
    })
}

/// Independent traces at one velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub velocity_kmh: f64,
    pub seed: u64,
    pub traces: Vec<SinrTrace>,
}

pub fn generate_traces(template: &ChannelConfig, velocity_kmh: f64, count: usize, steps: usize, seed: u64) -> Result<TraceSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = (0..count)
        .map(|_| generate_trace(&ChannelConfig { velocity_kmh, seed: rng.gen(), ..template.clone() }, steps))
        .collect::<Result<_>>()?;
    Ok(TraceSet { velocity_kmh, seed, traces })
}

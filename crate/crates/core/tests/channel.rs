use std::f64::consts::PI;

use amc_lab::channel::{
    doppler_frequency, generate_trace, sample_dataset, sample_from_trace, ChannelConfig, DatasetSpec, FadingChannel, PowerDelayProfile, Window,
};
use amc_lab::Error;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Power series of the Bessel function J0; converges quickly for |x| < 10.
fn bessel_j0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for m in 1..60 {
        term *= -q / (m as f64 * m as f64);
        sum += term;
    }
    sum
}

#[test]
fn complex_gain_autocorrelation_follows_j0() {
    let cfg = ChannelConfig { velocity_kmh: 100.0, subcarriers: 4, ..Default::default() };
    let fd = cfg.doppler_hz();
    let realizations = 1250;
    let starts = 8;
    let lags = [1usize, 2, 3, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut acc = [0.0; 4];
    let mut power = 0.0;
    let mut h0 = vec![Complex64::new(0.0, 0.0); 4];
    let mut h1 = h0.clone();
    for _ in 0..realizations {
        let ch = FadingChannel::new(&cfg, &mut rng).unwrap();
        for s in 0..starts {
            let t0 = s as f64 * 0.05;
            ch.response(t0, &mut h0);
            power += h0[0].norm_sqr();
            for (a, &lag) in acc.iter_mut().zip(&lags) {
                ch.response(t0 + lag as f64 * cfg.tti_s, &mut h1);
                *a += (h0[0] * h1[0].conj()).re;
            }
        }
    }
    assert!(realizations * starts >= 10_000);
    for (a, &lag) in acc.iter().zip(&lags) {
        let tau = lag as f64 * cfg.tti_s;
        let expected = bessel_j0(2.0 * PI * fd * tau);
        let got = a / power;
        assert!((got - expected).abs() < 0.05, "tau={tau}: {got} vs J0={expected}");
    }
}

#[test]
fn mean_gain_matches_profile_power() {
    let cfg = ChannelConfig { velocity_kmh: 100.0, subcarriers: 8, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut h = vec![Complex64::new(0.0, 0.0); 8];
    let (mut sum, mut n) = (0.0, 0usize);
    for _ in 0..20 {
        let ch = FadingChannel::new(&cfg, &mut rng).unwrap();
        for t in 0..2000 {
            ch.response(t as f64 * cfg.tti_s, &mut h);
            sum += h.iter().map(|g| g.norm_sqr()).sum::<f64>();
            n += h.len();
        }
    }
    let mean = sum / n as f64;
    assert!((mean - 1.0).abs() < 0.1, "mean |H|^2 = {mean}");
}

fn lag1_correlation(velocity_kmh: f64, traces: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..traces {
        let cfg = ChannelConfig { velocity_kmh, seed: 1000 + i as u64, subcarriers: 8, ..Default::default() };
        let tr = generate_trace(&cfg, 400).unwrap();
        for k in 0..tr.subcarriers {
            let x: Vec<f64> = (0..tr.steps).map(|t| tr.row(t)[k]).collect();
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
            let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
            total += cov / var;
        }
    }
    total / (traces * 8) as f64
}

#[test]
fn faster_users_decorrelate_faster() {
    let c: Vec<f64> = [40.0, 70.0, 100.0].iter().map(|&v| lag1_correlation(v, 100)).collect();
    assert!(c[0] > c[1] && c[1] > c[2], "{c:?}");
}

#[test]
fn traces_are_deterministic_per_seed() {
    let cfg = ChannelConfig { velocity_kmh: 70.0, seed: 42, ..Default::default() };
    let a = generate_trace(&cfg, 50).unwrap();
    assert_eq!(a, generate_trace(&cfg, 50).unwrap());
    let b = generate_trace(&ChannelConfig { seed: 43, ..cfg.clone() }, 50).unwrap();
    assert_ne!(a.values, b.values);
    a.validate().unwrap();
    assert!(a.values.iter().all(|&v| v as f32 as f64 == v));
}

#[test]
fn single_tap_is_flat_and_zero_speed_is_frozen() {
    let flat = ChannelConfig { profile: PowerDelayProfile::flat(), velocity_kmh: 80.0, seed: 5, ..Default::default() };
    let tr = generate_trace(&flat, 10).unwrap();
    for t in 0..tr.steps {
        assert!(tr.row(t).iter().all(|&v| v == tr.row(t)[0]));
    }
    let frozen = generate_trace(&ChannelConfig { velocity_kmh: 0.0, seed: 5, ..Default::default() }, 10).unwrap();
    for t in 1..frozen.steps {
        assert_eq!(frozen.row(t), frozen.row(0));
    }
}

#[test]
fn doppler_kinematics() {
    assert!((doppler_frequency(100.0, 2.4e9) - 100.0 / 3.6 * 2.4e9 / 299_792_458.0).abs() < 1e-9);
}

#[test]
fn window_span_and_short_traces() {
    let w = Window { history: 16, measurement_period: 2, feedback_delay: 2 };
    let tr = generate_trace(&ChannelConfig { seed: 9, ..Default::default() }, w.span()).unwrap();
    let s = sample_from_trace(&tr, &w, 0).unwrap();
    assert_eq!(s.history.len(), 16 * 48);
    assert_eq!(&s.history[15 * 48..], tr.row(30));
    assert_eq!(s.target, tr.row(32));
    let short = generate_trace(&ChannelConfig { seed: 9, ..Default::default() }, w.span() - 1).unwrap();
    assert!(matches!(sample_from_trace(&short, &w, 0), Err(Error::TraceTooShort { .. })));
}

#[test]
fn dataset_velocities_stay_in_range() {
    let spec = DatasetSpec {
        channel: ChannelConfig { subcarriers: 8, ..Default::default() },
        speed_kmh: (40.0, 100.0),
        window: Window { history: 4, measurement_period: 2, feedback_delay: 2 },
        count: 50,
        seed: 11,
    };
    let ds = sample_dataset(&spec).unwrap();
    assert_eq!(ds.len(), 50);
    assert!(ds.samples.iter().all(|s| (40.0..=100.0).contains(&s.velocity_kmh)));
    assert_eq!(ds, sample_dataset(&spec).unwrap());
    let empty = sample_dataset(&DatasetSpec { count: 0, ..spec }).unwrap();
    assert!(empty.is_empty());
}

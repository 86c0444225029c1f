//! Per-subcarrier SINR traces at three speeds: Doppler, time correlation and
//! frequency selectivity of the tapped-delay-line channel.
//!
//! `cargo run --release --example fading_traces`

use amc_lab::channel::{generate_trace, ChannelConfig, PowerDelayProfile};
use amc_lab::units::lin_to_db;

fn lag_corr(x: &[f64], lag: usize) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = x.iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum();
    cov / var
}

fn main() -> amc_lab::Result<()> {
    println!("{:>8} {:>10} {:>10} {:>10}", "km/h", "f_d (Hz)", "corr@1", "corr@4");
    for v in [3.0, 40.0, 100.0] {
        let mut c1 = 0.0;
        let mut c4 = 0.0;
        let runs = 50;
        for seed in 0..runs {
            let cfg = ChannelConfig { velocity_kmh: v, seed, ..Default::default() };
            let tr = generate_trace(&cfg, 400)?;
            let col: Vec<f64> = (0..tr.steps).map(|t| tr.row(t)[0]).collect();
            c1 += lag_corr(&col, 1);
            c4 += lag_corr(&col, 4);
        }
        let fd = ChannelConfig { velocity_kmh: v, ..Default::default() }.doppler_hz();
        let r = runs as f64;
        println!("{v:>8.0} {fd:>10.1} {:>10.3} {:>10.3}", c1 / r, c4 / r);
    }

    // Longer delay spreads decorrelate neighbouring subcarriers faster.
    println!("\n{:>8} {:>14} {:>14}", "profile", "corr@1 subc", "corr@8 subc");
    for profile in [PowerDelayProfile::uma(), PowerDelayProfile::umi()] {
        let (mut f1, mut f8) = (0.0, 0.0);
        for seed in 0..200 {
            let tr = generate_trace(&ChannelConfig { profile: profile.clone(), seed, ..Default::default() }, 1)?;
            let db: Vec<f64> = tr.row(0).iter().map(|&s| lin_to_db(s)).collect();
            f1 += lag_corr(&db, 1);
            f8 += lag_corr(&db, 8);
        }
        println!("{:>8} {:>14.3} {:>14.3}", profile.name, f1 / 200.0, f8 / 200.0);
    }

    let flat = ChannelConfig { profile: PowerDelayProfile::flat(), seed: 1, ..Default::default() };
    let tr = generate_trace(&flat, 1)?;
    let row = tr.row(0);
    println!("flat profile: all {} subcarriers equal = {}", row.len(), row.iter().all(|&s| s == row[0]));
    Ok(())
}

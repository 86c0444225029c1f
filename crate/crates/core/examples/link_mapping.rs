//! From a per-subcarrier SINR vector to a CQI decision, its BLER and the
//! throughput it earns, plus the calibrated CQI thresholds.
//!
//! `cargo run --release --example link_mapping`

use amc_lab::linkmap::{bler, eesm, LinkConfig, NUM_CQI};
use amc_lab::units::{db_to_lin, lin_to_db};

fn main() -> amc_lab::Result<()> {
    let link = LinkConfig::default();
    println!("cqi  mod     rate   threshold_db  bits/TTI");
    for c in 1..=NUM_CQI as u8 {
        let m = link.mcs(c);
        println!("{c:>3}  {:<6} {:.4} {:>12.2} {:>9.0}", m.modulation(), m.r, link.thresholds().get(c), link.block_bits(c));
    }

    // A frequency-selective snapshot: a 12 dB mean with a deep notch.
    let sinr_db: Vec<f64> = (0..48).map(|k| 12.0 + 6.0 * (k as f64 / 6.0).cos() - if (20..24).contains(&k) { 15.0 } else { 0.0 }).collect();
    let sinr: Vec<f64> = sinr_db.iter().map(|&d| db_to_lin(d)).collect();
    let mean_db = lin_to_db(sinr.iter().sum::<f64>() / sinr.len() as f64);
    println!("\nmean SINR {mean_db:.2} dB");
    for beta in [0.5, 1.0, 4.0, 16.0] {
        println!("EESM beta={beta:<4} -> {:.2} dB", lin_to_db(eesm(&sinr, beta)?));
    }
    let cqi = link.select_cqi(&sinr)?;
    let s_eff = link.effective_sinr_db(&sinr, cqi)?;
    let p = bler(cqi, s_eff, &link.bler);
    let tput = amc_lab::linkmap::throughput(p, link.mcs(cqi), link.re_per_tti, link.tti_s);
    println!("decision: CQI {cqi}, BLER {p:.4}, expected throughput {:.3} Mbit/s", tput / 1e6);
    Ok(())
}

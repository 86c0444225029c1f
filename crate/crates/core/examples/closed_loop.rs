//! The AMC loop with stale reports: NP against a genie that knows the SINR
//! at application time, across speeds and feedback delays.
//!
//! `cargo run --release --example closed_loop`

use amc_lab::amc::{link_stats, run_link, Forecaster, LinkRecord, TimingConfig};
use amc_lab::channel::generate_traces;
use amc_lab::channel::ChannelConfig;
use amc_lab::linkmap::LinkConfig;
use amc_lab::predictors::LastValue;

fn main() -> amc_lab::Result<()> {
    let link = LinkConfig::default();
    println!("{:>5} {:>3} {:>7} {:>9} {:>10} {:>10} {:>11}", "km/h", "T_d", "np bler", "np Mbit/s", "genie bler", "genie Mb/s", "np loss (%)");
    for v in [40.0, 100.0] {
        let set = generate_traces(&ChannelConfig::default(), v, 40, 200, 17)?;
        for td in [0, 2, 4] {
            let timing = TimingConfig { feedback_delay: td, ..Default::default() };
            let mut np: Vec<LinkRecord> = Vec::new();
            let mut genie: Vec<LinkRecord> = Vec::new();
            for (i, tr) in set.traces.iter().enumerate() {
                np.extend(run_link(tr, Forecaster::Model(&LastValue), &timing, &link, i as u64)?.records);
                genie.extend(run_link(tr, Forecaster::Genie, &timing, &link, i as u64)?.records);
            }
            let (a, b) = (link_stats(&np, &link)?, link_stats(&genie, &link)?);
            println!(
                "{v:>5.0} {td:>3} {:>7.3} {:>9.3} {:>10.3} {:>10.3} {:>11.1}",
                a.mean_bler.unwrap_or(0.0),
                a.realized_bps / 1e6,
                b.mean_bler.unwrap_or(0.0),
                b.realized_bps / 1e6,
                100.0 * (1.0 - a.realized_bps / b.realized_bps)
            );
        }
    }
    Ok(())
}

//! A reduced noise-robustness grid plus the parameter-count report, written
//! as CSV, text table and gnuplot data under `target/example-reports`.
//!
//! `cargo run --release --example experiment_grid`

use std::path::Path;

use amc_lab::config::Config;
use amc_lab::experiments::{run_experiment, ExperimentKind, RunControl};

fn main() -> amc_lab::Result<()> {
    let quick = Path::new(env!("CARGO_MANIFEST_DIR")).join("config/quick.conf");
    let overrides: Vec<String> = ["train.epochs=3", "data.train_count=600", "data.test_velocities=40,100"].map(String::from).to_vec();
    let settings = Config::load(Some(&quick), &overrides)?.settings()?;
    println!("config digest {}", settings.digest);

    let out = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/example-reports");
    for kind in [ExperimentKind::CostReport, ExperimentKind::NoiseRobustness] {
        let report = run_experiment(kind, &settings, &RunControl::default())?;
        print!("\n{}", report.table());
        for p in report.write(&out)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

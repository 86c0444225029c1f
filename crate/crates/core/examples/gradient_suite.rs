//! Finite-difference checks of every layer kind and of the composed models
//! on the tiny configuration.
//!
//! `cargo run --release --example gradient_suite`

use amc_lab::gradsuite;

fn main() -> amc_lab::Result<()> {
    let entries = gradsuite::run()?;
    for e in &entries {
        println!("{:<22} {:>10.2e} {:>6} {}", e.name, e.report.max_rel_err, e.report.checked, e.report.worst);
    }
    println!("worst {:.2e}, tolerance {:.0e}", gradsuite::max_rel_err(&entries), gradsuite::TOLERANCE);
    Ok(())
}

use std::time::Instant;

use amc_lab::gradsuite::{max_rel_err, run, TOLERANCE};

#[test]
fn every_check_passes_within_a_minute() {
    let start = Instant::now();
    let entries = run().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for e in &entries {
        assert!(e.report.max_rel_err < TOLERANCE, "{}: {}", e.name, e.report.max_rel_err);
        assert!(e.report.checked > 0, "{} checked nothing", e.name);
    }
    assert!(max_rel_err(&entries) < TOLERANCE);
    assert!(elapsed < 60.0, "{elapsed:.1}s");
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    for n in ["conv3x3", "fc", "relu", "sigmoid", "global-avg-pool", "layer-norm", "self-attention", "softmax", "patchnet-full", "gru", "lstm", "rnn"] {
        assert!(names.contains(&n), "missing {n}");
    }
}

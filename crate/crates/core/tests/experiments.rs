use amc_lab::config::{Config, Settings};
use amc_lab::experiments::{cost_report, run_experiment, ExperimentKind, ExperimentReport, RunControl};

fn small(extra: &[&str]) -> Settings {
    let mut sets: Vec<String> = [
        "channel.subcarriers=8",
        "timing.history=8",
        "model.patch=2",
        "model.d_model=16",
        "model.heads=2",
        "model.layers=1",
        "model.ff_width=32",
        "model.rnn_hidden=8",
        "model.rnn_layers=2",
        "train.epochs=2",
        "train.batch_size=16",
        "data.train_count=48",
        "data.val_count=16",
        "data.test_pairs=24",
        "data.test_traces=2",
        "data.test_trace_steps=40",
        "data.test_velocities=40,100",
        "experiment.seeds=1,2",
        "experiment.models=patchnet",
        "experiment.jobs=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    Config::load(None, &sets).unwrap().settings().unwrap()
}

#[test]
fn cost_report_counts_are_exact() {
    let s = Config::defaults().settings().unwrap();
    let r = cost_report(&s).unwrap();
    let total = |p: &str| r.mean(&format!("policy={p}"), "patchnet", "total_params").unwrap();
    let trainable = |p: &str| r.mean(&format!("policy={p}"), "patchnet", "trainable_params").unwrap();
    assert_eq!(total("ln-only"), total("all-params"));
    assert!(trainable("ln-only") < trainable("all-params"));
    assert_eq!(r.mean("policy=ln-only", "patchnet", "backbone_trainable_params"), Some(512.0));
    assert!(r.mean("policy=ln-only", "patchnet", "trainable_backbone_pct").unwrap() < 1.0);
    assert_eq!(r.mean("policy=frozen", "patchnet", "backbone_trainable_params"), Some(0.0));
    for m in ["rnn", "lstm", "gru"] {
        assert!(r.mean("-", m, "total_params").unwrap() > 0.0);
    }
    for row in &r.rows {
        if row.metric.ends_with("_params") {
            assert_eq!(row.mean.fract(), 0.0, "{row:?}");
        }
    }
}

#[test]
fn reports_reproduce_and_cache_is_transparent() {
    let s = small(&[]);
    let dir = tempfile::tempdir().unwrap();
    let cached = RunControl { cache_dir: Some(dir.path().to_path_buf()) };
    let fresh = run_experiment(ExperimentKind::VelocitySweep, &s, &RunControl::default()).unwrap();
    let first = run_experiment(ExperimentKind::VelocitySweep, &s, &cached).unwrap();
    let second = run_experiment(ExperimentKind::VelocitySweep, &s, &cached).unwrap();
    assert_eq!(fresh.to_csv(), first.to_csv());
    assert_eq!(first.to_csv(), second.to_csv());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 2);
    for v in ["v=40", "v=100", "all"] {
        for m in ["patchnet", "np"] {
            assert!(fresh.mean(v, m, "nmse_db").is_some(), "{v} {m}");
        }
        assert!(fresh.mean(v, "genie", "bler").is_some());
    }
    assert_eq!(fresh.seeds, vec![1, 2]);
    assert_eq!(fresh.digest, s.digest);
}

#[test]
fn worker_count_does_not_change_results() {
    let one = run_experiment(ExperimentKind::NoiseRobustness, &small(&["experiment.jobs=1"]), &RunControl::default()).unwrap();
    let two = run_experiment(ExperimentKind::NoiseRobustness, &small(&["experiment.jobs=3"]), &RunControl::default()).unwrap();
    assert_eq!(one.rows, two.rows);
    assert_eq!(one.digest, two.digest);
    let conds: Vec<&str> = one.rows.iter().filter(|r| r.model == "np" && r.metric == "nmse_db").map(|r| r.condition.as_str()).collect();
    assert_eq!(conds, ["clean", "snr=10", "snr=15", "snr=20", "snr=25", "snr=30"]);
}

#[test]
fn grids_cover_their_conditions() {
    let s = small(&["experiment.seeds=1", "data.test_velocities=70", "experiment.link_eval=false"]);
    let r = run_experiment(ExperimentKind::AblationModules, &s, &RunControl::default()).unwrap();
    for m in ["full", "w/o-sa", "w/o-patching", "w/o-backbone", "np"] {
        assert!(r.mean("all", m, "nmse_db").is_some(), "{m}");
    }
    let r = run_experiment(ExperimentKind::AblationDataScale, &small(&["experiment.seeds=1", "experiment.data_scales=0.5,1"]), &RunControl::default()).unwrap();
    assert_eq!(r.mean("scale=1", "patchnet", "nmse_increase_db_pct"), Some(0.0));
    assert!(r.mean("scale=0.5", "patchnet", "nmse_increase_lin_pct").is_some());
    let r = run_experiment(ExperimentKind::FewShot, &small(&["experiment.seeds=1"]), &RunControl::default()).unwrap();
    assert!(r.notes.iter().any(|n| n.contains("10%")));
}

#[test]
fn csv_round_trip() {
    let s = small(&["experiment.seeds=1", "data.test_velocities=40"]);
    let r = run_experiment(ExperimentKind::Generalization, &s, &RunControl::default()).unwrap();
    let back = ExperimentReport::parse_csv(&r.to_csv()).unwrap();
    assert_eq!(back.to_csv(), r.to_csv());
    assert_eq!(back.experiment, "generalization");
}

#[test]
fn unknown_kind_is_an_error() {
    assert!("fastest-sweep".parse::<ExperimentKind>().is_err());
    assert_eq!("cost-report".parse::<ExperimentKind>().unwrap(), ExperimentKind::CostReport);
}

use std::path::PathBuf;

use amc_lab::config::Config;

fn preset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config").join(name)
}

#[test]
fn bundled_presets_resolve() {
    for name in ["default.conf", "quick.conf", "high-mobility.conf"] {
        let cfg = Config::load(Some(&preset(name)), &[]).unwrap();
        cfg.settings().unwrap();
    }
    let hm = Config::load(Some(&preset("high-mobility.conf")), &[]).unwrap().settings().unwrap();
    assert_eq!(hm.data.test_velocities, vec![300.0, 400.0, 500.0]);
    let plain = Config::defaults().settings().unwrap();
    let same = Config::load(Some(&preset("default.conf")), &[]).unwrap().settings().unwrap();
    assert_eq!(plain.digest, same.digest);
}

#[test]
fn digest_tracks_results_not_locations() {
    let base = Config::defaults().digest();
    let moved = Config::load(None, &["paths.out_dir=/elsewhere".into(), "experiment.jobs=7".into()]).unwrap();
    assert_eq!(moved.digest(), base);
    let changed = Config::load(None, &["train.epochs=3".into()]).unwrap();
    assert_ne!(changed.digest(), base);
    assert_eq!(base.len(), 16);
}

#[test]
fn files_include_relative_to_themselves() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    std::fs::write(dir.path().join("sub/base.conf"), "[train]\nepochs = 7\nbatch_size = 8\n").unwrap();
    std::fs::write(dir.path().join("top.conf"), "include = sub/base.conf\n# later keys win\n[train]\nepochs = 9\n").unwrap();
    let cfg = Config::load(Some(&dir.path().join("top.conf")), &["train.lr=0.01".into()]).unwrap();
    let t = cfg.train().unwrap();
    assert_eq!((t.epochs, t.batch_size, t.lr), (9, 8, 0.01));
    std::fs::write(dir.path().join("bad.conf"), "[train]\nepoch = 9\n").unwrap();
    let err = Config::load(Some(&dir.path().join("bad.conf")), &[]).unwrap_err().to_string();
    assert!(err.contains("bad.conf:2"), "{err}");
}

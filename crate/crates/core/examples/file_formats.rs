//! Writes a pair dataset, a trace set and a checkpoint, reads them back and
//! confirms the values survive exactly.
//!
//! `cargo run --release --example file_formats`

use amc_lab::channel::{generate_traces, sample_dataset, ChannelConfig, DatasetSpec, Window};
use amc_lab::files;
use amc_lab::predictors::{ModelConfig, NeuralPredictor, Predictor};

fn main() -> amc_lab::Result<()> {
    let dir = std::env::temp_dir().join(format!("amclab-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| amc_lab::Error::Invalid(e.to_string()))?;
    let digest = "0000000000000000";

    let spec = DatasetSpec { channel: ChannelConfig::default(), speed_kmh: (40.0, 100.0), window: Window::default(), count: 10, seed: 3 };
    let ds = sample_dataset(&spec)?;
    let pairs = dir.join("pairs.amct");
    files::save_dataset(&pairs, &ds, digest)?;
    let (back, _) = files::load_dataset(&pairs)?;
    let exact = back.samples.iter().zip(&ds.samples).all(|(a, b)| a.history == b.history && a.target == b.target);
    println!("pairs:  {} samples, values exact: {exact}", back.len());
    for (k, v) in files::read_header(&pairs)?.describe() {
        println!("  {k}={v}");
    }

    let traces = dir.join("traces.amct");
    let set = generate_traces(&ChannelConfig::default(), 60.0, 4, 100, 5)?;
    files::save_traces(&traces, &set, digest)?;
    let (tback, _) = files::load_traces(&traces)?;
    println!("traces: {} x {} TTIs, values exact: {}", tback.traces.len(), tback.traces[0].steps, tback.traces.iter().zip(&set.traces).all(|(a, b)| a.values == b.values));

    let mut net = NeuralPredictor::new(&ModelConfig::default(), 16, 48, 1)?;
    net.round_to_checkpoint();
    let ckpt = dir.join("model.ckpt");
    net.save(&ckpt, digest)?;
    let (loaded, _) = NeuralPredictor::load(&ckpt)?;
    let h = &ds.samples[0].history.iter().map(|&s| amc_lab::units::lin_to_db(s)).collect::<Vec<_>>();
    let same = loaded.predict(h, 16, 48)? == net.predict(h, 16, 48)?;
    println!("checkpoint: {} parameters, identical predictions: {same}", loaded.param_report().total);

    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

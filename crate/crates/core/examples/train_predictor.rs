//! Trains a small patch network on synthetic pairs and compares its held-out
//! NMSE with the last-value baseline, per speed.
//!
//! `cargo run --release --example train_predictor`

use amc_lab::channel::{sample_dataset, ChannelConfig, DatasetSpec, Window};
use amc_lab::predictors::{nmse_db, LastValue, ModelConfig, NeuralPredictor};
use amc_lab::train::{nmse_stats, train, PairSet, TrainConfig};

fn pairs(speed: (f64, f64), count: usize, seed: u64) -> amc_lab::Result<PairSet> {
    let spec = DatasetSpec { channel: ChannelConfig::default(), speed_kmh: speed, window: Window::default(), count, seed };
    Ok(PairSet::from_dataset(&sample_dataset(&spec)?))
}

fn main() -> amc_lab::Result<()> {
    let train_set = pairs((40.0, 100.0), 1500, 1)?;
    let val_set = pairs((40.0, 100.0), 300, 2)?;
    let model = ModelConfig { d_model: 32, layers: 1, ff_width: 64, ..ModelConfig::default() };
    let mut net = NeuralPredictor::new(&model, 16, 48, 7)?;
    let r = net.param_report();
    println!("patchnet: {} parameters, {} trainable", r.total, r.trainable);

    let cfg = TrainConfig { epochs: 8, ..TrainConfig::default() };
    let outcome = train(&mut net, &train_set, &val_set, &cfg)?;
    for e in &outcome.curve {
        println!("epoch {:>2}  train {:>7.2} dB  val {:>7.2} dB", e.epoch, nmse_db(e.train_nmse), nmse_db(e.val_nmse));
    }
    println!("kept epoch {}", outcome.best_epoch);

    println!("\n{:>5} {:>12} {:>12}", "km/h", "np (dB)", "net (dB)");
    for v in [40.0, 70.0, 100.0] {
        let test = pairs((v, v), 400, 100 + v as u64)?;
        let np = nmse_stats(&LastValue, &test)?.pooled;
        let net_nmse = nmse_stats(&net, &test)?.pooled;
        println!("{v:>5.0} {:>12.2} {:>12.2}", nmse_db(np), nmse_db(net_nmse));
    }
    Ok(())
}

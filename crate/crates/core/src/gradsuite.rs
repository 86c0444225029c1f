//! Finite-difference checks for every layer kind and the composed models on a
//! tiny configuration.

use amc_nn::{grad_check, projection_loss, GradCheckReport, LayerSpec, ParamStore, Tensor, TransformerBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::predictors::{BackboneKind, FreezePolicy, ModelConfig, ModelKind, NeuralPredictor};

/// Relative-error tolerance for every check.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// `L=8, K=4, N=2, d_model=8`, one backbone block, everything trainable.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::PatchNet,
        patch: 2,
        sa_iterations: 2,
        se_reduction: 2,
        d_model: 8,
        heads: 2,
        layers: 1,
        ff_width: 16,
        backbone: BackboneKind::TinyTransformer,
        freeze: FreezePolicy::AllParams,
        rnn_hidden: 5,
        rnn_layers: 2,
    }
}

pub const TINY_HISTORY: usize = 8;
pub const TINY_SUBCARRIERS: usize = 4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Moves parameters off their initial values so biases and gains are exercised.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn layer(name: &str, spec: LayerSpec, input: &[usize], seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let l = spec.build(&mut store, "layer", &mut rng)?;
    perturb(&mut store, &mut rng);
    let x = random_tensor(input, &mut rng);
    let report = grad_check(&store, &x, TOLERANCE, |tape, s, xn| {
        let y = l.forward(tape, s, xn)?;
        projection_loss(tape, y, seed)
    })?;
    Ok(SuiteEntry { name: name.into(), report })
}

fn model(name: &str, cfg: &ModelConfig, seed: u64, denormalize: bool) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NeuralPredictor::new(cfg, TINY_HISTORY, TINY_SUBCARRIERS, seed)?;
    perturb(net.store_mut(), &mut rng);
    let mut shape = vec![2];
    shape.extend(net.input_shape());
    let x = random_tensor(&shape, &mut rng);
    let (mu, sigma) = (vec![3.0, -1.5], vec![2.0, 0.7]);
    let report = grad_check(net.store(), &x, TOLERANCE, |tape, s, xn| {
        let y = if denormalize { net.forward(tape, s, xn, &mu, &sigma) } else { net.forward_normalized(tape, s, xn) }
            .map_err(|e| amc_nn::NnError::GradCheck(e.to_string()))?;
        projection_loss(tape, y, seed)
    })?;
    Ok(SuiteEntry { name: name.into(), report })
}

fn sinr_attention(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NeuralPredictor::new(&tiny_model_config(), TINY_HISTORY, TINY_SUBCARRIERS, seed)?;
    perturb(net.store_mut(), &mut rng);
    let mut shape = vec![2];
    shape.extend(net.input_shape());
    let x = random_tensor(&shape, &mut rng);
    let pn = net.patch_net().expect("patch network").clone();
    let report = grad_check(net.store(), &x, TOLERANCE, |tape, s, xn| {
        let (y, _) = pn.sinr_attention(tape, s, xn).map_err(|e| amc_nn::NnError::GradCheck(e.to_string()))?;
        projection_loss(tape, y, seed)
    })?;
    Ok(SuiteEntry { name: "sinr-attention".into(), report })
}

fn transformer_block(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, &mut rng)?;
    perturb(&mut store, &mut rng);
    let x = random_tensor(&[2, 3, 8], &mut rng);
    let report = grad_check(&store, &x, TOLERANCE, |tape, s, xn| {
        let y = block.forward(tape, s, xn)?;
        projection_loss(tape, y, seed)
    })?;
    Ok(SuiteEntry { name: "transformer-block".into(), report })
}

/// Runs every check. Entries are in a fixed order.
pub fn run() -> Result<Vec<SuiteEntry>> {
    let tiny = tiny_model_config();
    let rec = |kind| ModelConfig { kind, ..tiny.clone() };
    Ok(vec![
        layer("conv3x3", LayerSpec::conv3x3(3), &[2, 3, 4, 5], 1)?,
        layer("conv1x3", LayerSpec::Conv2D { in_channels: 2, out_channels: 3, kernel: (1, 3), padding: (0, 1) }, &[2, 2, 1, 6], 2)?,
        layer("fc", LayerSpec::fc(4, 3), &[5, 4], 3)?,
        layer("relu", LayerSpec::ReLU, &[3, 7], 4)?,
        layer("sigmoid", LayerSpec::Sigmoid, &[3, 7], 5)?,
        layer("global-avg-pool", LayerSpec::GlobalAvgPool2D, &[2, 3, 2, 4], 6)?,
        layer("layer-norm", LayerSpec::LayerNorm { features: 6, eps: 1e-5 }, &[4, 6], 7)?,
        layer("self-attention", LayerSpec::MultiHeadSelfAttention { d_model: 8, heads: 2 }, &[2, 3, 8], 8)?,
        layer("softmax", LayerSpec::Softmax, &[3, 5], 9)?,
        transformer_block(10)?,
        sinr_attention(11)?,
        model("patchnet-normalized", &tiny, 12, false)?,
        model("patchnet-full", &tiny, 13, true)?,
        model("rnn", &rec(ModelKind::Rnn), 14, false)?,
        model("lstm", &rec(ModelKind::Lstm), 15, false)?,
        model("gru", &rec(ModelKind::Gru), 16, false)?,
    ])
}

pub fn max_rel_err(entries: &[SuiteEntry]) -> f64 {
    entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max)
}

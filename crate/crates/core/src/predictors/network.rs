use std::path::Path;

use amc_nn::{checkpoint, NodeId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelKind};
use super::patchnet::PatchNet;
use super::recurrent::RecurrentNet;
use super::{normalize, num_patches, HistoryBatch, Predictor, NORM_VERSION};
use crate::error::{Error, Result};

/// Largest batch evaluated on one tape during inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug)]
enum Net {
    Patch(PatchNet),
    Recurrent(RecurrentNet),
}

/// Normalized network input plus the per-sample statistics.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `[B, L', N, K]` for the patch network, `[B, L, K]` for recurrent ones.
    pub x: Tensor,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Parameter element counts by component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub sa: usize,
    pub embedding: usize,
    pub backbone: usize,
    pub backbone_trainable: usize,
    pub head: usize,
    pub recurrent: usize,
}

/// A trainable forecaster with its parameters.
#[derive(Clone, Debug)]
pub struct NeuralPredictor {
    config: ModelConfig,
    history: usize,
    subcarriers: usize,
    store: ParamStore,
    net: Net,
    name: String,
}

impl NeuralPredictor {
    /// Builds and initializes from `seed`, then applies the freeze policy to the backbone.
    pub fn new(config: &ModelConfig, history: usize, subcarriers: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match config.kind {
            ModelKind::PatchNet => Net::Patch(PatchNet::new(&mut store, config, history, subcarriers, &mut rng)?),
            _ => Net::Recurrent(RecurrentNet::new(&mut store, config, history, subcarriers, &mut rng)?),
        };
        let policy = config.freeze;
        store.set_trainable_where(false, |n| n.starts_with("backbone.") && !policy.trains(n));
        Ok(Self { config: config.clone(), history, subcarriers, store, net, name: config.kind.to_string() })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn patch_net(&self) -> Option<&PatchNet> {
        match &self.net {
            Net::Patch(p) => Some(p),
            Net::Recurrent(_) => None,
        }
    }

    /// Per-sample input shape, without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.net {
            Net::Patch(p) => p.input_shape().to_vec(),
            Net::Recurrent(_) => vec![self.history, self.subcarriers],
        }
    }

    /// Normalizes (and for the patch network, patches) each history.
    pub fn prepare(&self, batch: HistoryBatch<'_>) -> Result<PreparedBatch> {
        self.check_window(&batch)?;
        let per_out: usize = self.input_shape().iter().product();
        let mut x = vec![0.0; batch.batch * per_out];
        let mut mu = Vec::with_capacity(batch.batch);
        let mut sigma = Vec::with_capacity(batch.batch);
        for i in 0..batch.batch {
            let p = normalize(batch.sample(i), batch.history, batch.subcarriers)?;
            // Patches are contiguous row blocks, so patching is just zero-padding the tail.
            x[i * per_out..i * per_out + p.history.len()].copy_from_slice(&p.history);
            mu.push(p.mu);
            sigma.push(p.sigma);
        }
        let mut shape = vec![batch.batch];
        shape.extend(self.input_shape());
        Ok(PreparedBatch { x: Tensor::new(&shape, x)?, mu, sigma })
    }

    /// Normalized input node to normalized `[B, K]` output.
    pub fn forward_normalized(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match &self.net {
            Net::Patch(p) => p.forward(tape, store, x),
            Net::Recurrent(r) => r.forward(tape, store, x),
        }
    }

    /// Full forward to dB predictions `[B, K]`: `sigma * out + mu`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, mu: &[f64], sigma: &[f64]) -> Result<NodeId> {
        let out = self.forward_normalized(tape, store, x)?;
        let s = tape.input(Tensor::from_vec(sigma.to_vec()));
        let m = tape.input(Tensor::from_vec(mu.to_vec()));
        let out = tape.mul_prefix(out, s)?;
        Ok(tape.add_prefix(out, m)?)
    }

    pub fn predict_prepared(&self, batch: &PreparedBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.x.clone());
        let y = self.forward(&mut tape, &self.store, x, &batch.mu, &batch.sigma)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn param_report(&self) -> ParamReport {
        let s = &self.store;
        let count = |prefix: &str| s.count_where(|n| n.starts_with(prefix)).0;
        let (backbone, backbone_trainable) = s.count_where(|n| n.starts_with("backbone."));
        ParamReport {
            total: s.total_count(),
            trainable: s.trainable_count(),
            sa: count("sa."),
            embedding: count("embed."),
            backbone,
            backbone_trainable,
            head: count("head.") + count("out."),
            recurrent: count("rnn."),
        }
    }

    pub fn metadata(&self, digest: &str) -> Vec<(String, String)> {
        let mut meta = vec![
            ("kind".to_string(), "predictor".to_string()),
            ("name".to_string(), self.name.clone()),
            ("history".to_string(), self.history.to_string()),
            ("subcarriers".to_string(), self.subcarriers.to_string()),
            ("norm_version".to_string(), NORM_VERSION.to_string()),
            ("digest".to_string(), digest.to_string()),
        ];
        meta.extend(self.config.to_metadata());
        meta
    }

    pub fn save(&self, path: &Path, digest: &str) -> Result<()> {
        let mut bytes = Vec::new();
        checkpoint::write_checkpoint(&mut bytes, &self.store, &self.metadata(digest))?;
        crate::files::write_bytes(path, &bytes)
    }

    /// Rebuilds the architecture from checkpoint metadata and loads values and flags.
    pub fn from_checkpoint(store: &ParamStore, meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        if get("kind") != Some("predictor") {
            return Err(Error::Config("checkpoint is not a predictor checkpoint".into()));
        }
        if get("norm_version") != Some(&NORM_VERSION.to_string()) {
            return Err(Error::Config(format!("unsupported normalization version {:?}", get("norm_version"))));
        }
        let num = |k: &str| -> Result<usize> {
            get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{k}`")))
        };
        let cfg = ModelConfig::from_metadata(meta)?;
        let mut model = Self::new(&cfg, num("history")?, num("subcarriers")?, 0)?;
        model.store.copy_values_from(store)?;
        for id in store.ids() {
            model.store.get_mut(id).set_trainable(store.get(id).trainable());
        }
        if let Some(name) = get("name") {
            model.name = name.to_string();
        }
        Ok(model)
    }

    /// Returns the model and the digest recorded with it.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (store, meta) = checkpoint::load(path)?;
        let digest = meta.iter().find(|(k, _)| k == "digest").map(|(_, v)| v.clone()).unwrap_or_default();
        Ok((Self::from_checkpoint(&store, &meta)?, digest))
    }

    /// Rounds every parameter to the precision checkpoints store, so a model
    /// in memory and its reloaded checkpoint predict identically.
    pub fn round_to_checkpoint(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Patches per history window.
    pub fn patches(&self) -> usize {
        num_patches(self.history, self.config.patch)
    }
}

impl Predictor for NeuralPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn window(&self) -> Option<(usize, usize)> {
        Some((self.history, self.subcarriers))
    }

    fn predict_batch(&self, batch: HistoryBatch<'_>) -> Result<Vec<f64>> {
        self.check_window(&batch)?;
        let per = batch.history * batch.subcarriers;
        let mut out = Vec::with_capacity(batch.batch * batch.subcarriers);
        for chunk in batch.data.chunks(INFERENCE_CHUNK * per) {
            let sub = HistoryBatch::new(chunk, batch.history, batch.subcarriers)?;
            out.extend(self.predict_prepared(&self.prepare(sub)?)?);
        }
        Ok(out)
    }
}

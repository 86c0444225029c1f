//! Layered `key = value` configuration.
//!
//! Resolution order is bundled defaults, then a config file (plus the one file
//! it may include), then `AMCLAB_PATHS_*` environment variables for `paths.*`
//! keys, then command-line `--set section.key=value` overrides. The bundled
//! defaults double as the schema: any key they do not define is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::channel::{ChannelConfig, PowerDelayProfile, Window};
use crate::error::{io_err, Error, Result};
use crate::linkmap::{BlerModel, CqiTable, LinkConfig, McsEntry, NUM_CQI};
use crate::predictors::{BackboneKind, FreezePolicy, ModelConfig, ModelKind};
use crate::train::{LossKind, TrainConfig};

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.conf");
pub const ENV_PREFIX: &str = "AMCLAB_PATHS_";
const MAX_INCLUDE_DEPTH: usize = 8;
/// Hex characters of the SHA-256 kept in the digest.
const DIGEST_LEN: usize = 16;

/// One parsed file: its entries in order and its include target, if any.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parsed {
    pub include: Option<String>,
    pub entries: Vec<(String, String, usize)>,
}

/// Parses flat config text. Keys are qualified by the enclosing `[section]`.
pub fn parse(text: &str, origin: &str) -> Result<Parsed> {
    let mut out = Parsed::default();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Config(format!("{origin}:{line_no}: {msg}"));
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| bad("unterminated section header"))?.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(bad(&format!("invalid section name `{name}`")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad(&format!("invalid key `{key}`")));
        }
        if key == "include" && section.is_empty() {
            if out.include.is_some() {
                return Err(bad("only one include directive is allowed per file"));
            }
            out.include = Some(value.to_string());
            continue;
        }
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        out.entries.push((full, value.to_string(), line_no));
    }
    Ok(out)
}

/// Fully resolved key-value tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self::defaults()
    }
}

impl Config {
    pub fn defaults() -> Self {
        let parsed = parse(DEFAULT_CONFIG, "<defaults>").expect("bundled defaults parse");
        Self { values: parsed.entries.into_iter().map(|(k, v, _)| (k, v)).collect() }
    }

    /// Defaults, then `file`, then environment path overrides, then `sets`.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            cfg.merge_file(path)?;
        }
        cfg.apply_env(std::env::vars())?;
        for s in sets {
            cfg.set_pair(s)?;
        }
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        self.merge_file_at(path, 0)
    }

    fn merge_file_at(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(Error::Config(format!("{}: includes nested deeper than {MAX_INCLUDE_DEPTH}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let origin = path.display().to_string();
        let parsed = parse(&text, &origin)?;
        if let Some(inc) = &parsed.include {
            let base = path.parent().unwrap_or(Path::new("."));
            self.merge_file_at(&base.join(inc), depth + 1)?;
        }
        for (k, v, line) in parsed.entries {
            self.set(&k, &v).map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?;
        }
        Ok(())
    }

    /// Applies `AMCLAB_PATHS_<NAME>` variables to `paths.<name>`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut found: Vec<(String, String)> =
            vars.into_iter().filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|n| (format!("paths.{}", n.to_ascii_lowercase()), v))).collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v).map_err(|e| Error::Config(format!("environment: {e}")))?;
        }
        Ok(())
    }

    /// `section.key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Whether a key takes part in the digest. Paths and worker count only
    /// change where and how fast artifacts are produced, not their content.
    fn digested(key: &str) -> bool {
        !key.starts_with("paths.") && key != "experiment.jobs"
    }

    /// `key = value` lines of every digested key, sorted.
    pub fn canonical(&self) -> String {
        self.values.iter().filter(|(k, _)| Self::digested(k)).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Truncated hex SHA-256 of [`Config::canonical`].
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect::<String>()[..DIGEST_LEN].to_string()
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        v.parse().map_err(|e| Error::Config(format!("`{key} = {v}`: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`{key} = {v}`: {e}")))).collect()
    }

    /// `lo:hi` or a single value.
    pub fn range(&self, key: &str) -> Result<(f64, f64)> {
        parse_range(self.get(key)?).map_err(|e| Error::Config(format!("`{key}`: {e}")))
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        let cfg = ChannelConfig {
            carrier_hz: self.parse_value("channel.carrier_hz")?,
            subcarrier_spacing_hz: self.parse_value("channel.subcarrier_spacing_hz")?,
            subcarriers: self.parse_value("channel.subcarriers")?,
            tti_s: self.parse_value::<f64>("channel.tti_us")? * 1e-6,
            tx_power_dbm: self.parse_value("channel.tx_power_dbm")?,
            noise_dbm: self.parse_value("channel.noise_dbm")?,
            velocity_kmh: 0.0,
            profile: PowerDelayProfile::by_name(self.get("channel.profile")?)?,
            mean_snr_db: self.range("channel.mean_snr_db")?,
            sinusoids: self.parse_value("channel.sinusoids")?,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn window(&self) -> Result<Window> {
        let w = Window {
            history: self.parse_value("timing.history")?,
            measurement_period: self.parse_value("timing.measurement_period")?,
            feedback_delay: self.parse_value("timing.feedback_delay")?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn cqi_table(&self) -> Result<CqiTable> {
        let mut entries = [McsEntry::NONE; NUM_CQI];
        for (i, e) in entries.iter_mut().enumerate() {
            let key = format!("link.cqi_{}", i + 1);
            let row: Vec<f64> = self.list(&key)?;
            match row[..] {
                [q, r] if q.fract() == 0.0 && (0.0..=255.0).contains(&q) => *e = McsEntry { q: q as u8, r: r / 1024.0 },
                _ => return Err(Error::Config(format!("`{key}` must be `modulation order, rate x 1024`"))),
            }
        }
        CqiTable::new(entries)
    }

    pub fn bler_model(&self) -> Result<BlerModel> {
        BlerModel::new(self.fixed("bler.midpoints_db")?, self.fixed("bler.slopes")?)
    }

    fn fixed(&self, key: &str) -> Result<[f64; NUM_CQI]> {
        let v: Vec<f64> = self.list(key)?;
        v.try_into().map_err(|v: Vec<f64>| Error::Config(format!("`{key}` needs {NUM_CQI} values, got {}", v.len())))
    }

    pub fn link(&self) -> Result<LinkConfig> {
        let per_cqi = if self.get("link.beta_per_cqi")?.is_empty() { None } else { Some(self.fixed("link.beta_per_cqi")?) };
        LinkConfig::new(
            self.cqi_table()?,
            self.bler_model()?,
            self.parse_value("link.target_bler")?,
            self.parse_value("link.beta")?,
            per_cqi,
            self.parse_value("link.re_per_tti")?,
            self.parse_value::<f64>("channel.tti_us")? * 1e-6,
        )
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            kind: self.parse_value::<ModelKind>("model.kind")?,
            patch: self.parse_value("model.patch")?,
            sa_iterations: self.parse_value("model.sa_iterations")?,
            se_reduction: self.parse_value("model.se_reduction")?,
            d_model: self.parse_value("model.d_model")?,
            heads: self.parse_value("model.heads")?,
            layers: self.parse_value("model.layers")?,
            ff_width: self.parse_value("model.ff_width")?,
            backbone: self.parse_value::<BackboneKind>("model.backbone")?,
            freeze: self.parse_value::<FreezePolicy>("model.freeze")?,
            rnn_hidden: self.parse_value("model.rnn_hidden")?,
            rnn_layers: self.parse_value("model.rnn_layers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let noise = match self.get("train.noise_snr_db")? {
            "off" | "" => None,
            _ => Some(self.range("train.noise_snr_db")?),
        };
        let cfg = TrainConfig {
            loss: self.parse_value::<LossKind>("train.loss")?,
            batch_size: self.parse_value("train.batch_size")?,
            epochs: self.parse_value("train.epochs")?,
            lr: self.parse_value("train.lr")?,
            beta1: self.parse_value("train.beta1")?,
            beta2: self.parse_value("train.beta2")?,
            eps: self.parse_value("train.eps")?,
            seed: self.parse_value("train.seed")?,
            noise_snr_db: noise,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data(&self) -> Result<DataSettings> {
        let d = DataSettings {
            train_count: self.parse_value("data.train_count")?,
            val_count: self.parse_value("data.val_count")?,
            speed_kmh: self.range("data.speed_kmh")?,
            seed: self.parse_value("data.seed")?,
            test_velocities: self.list("data.test_velocities")?,
            test_pairs: self.parse_value("data.test_pairs")?,
            test_traces: self.parse_value("data.test_traces")?,
            test_trace_steps: self.parse_value("data.test_trace_steps")?,
            test_seed: self.parse_value("data.test_seed")?,
        };
        if d.test_velocities.is_empty() || d.test_velocities.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("data.test_velocities needs at least one non-negative velocity".into()));
        }
        if d.train_count == 0 {
            return Err(Error::Config("data.train_count must be at least 1".into()));
        }
        Ok(d)
    }

    pub fn experiment(&self) -> Result<ExperimentSettings> {
        let e = ExperimentSettings {
            seeds: self.list("experiment.seeds")?,
            models: self.list("experiment.models")?,
            noise_snr_db: self.list("experiment.noise_snr_db")?,
            few_shot_fraction: self.parse_value("experiment.few_shot_fraction")?,
            data_scales: self.list("experiment.data_scales")?,
            freeze_policies: self.list("experiment.freeze_policies")?,
            generalization_profile: PowerDelayProfile::by_name(self.get("experiment.generalization_profile")?)?,
            link_eval: self.parse_value("experiment.link_eval")?,
            jobs: self.parse_value("experiment.jobs")?,
        };
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds needs at least one seed".into()));
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(e.few_shot_fraction) || !e.data_scales.iter().all(|&f| frac_ok(f)) {
            return Err(Error::Config("data fractions must lie in (0, 1]".into()));
        }
        Ok(e)
    }

    pub fn paths(&self) -> Result<Paths> {
        Ok(Paths {
            data_dir: PathBuf::from(self.get("paths.data_dir")?),
            out_dir: PathBuf::from(self.get("paths.out_dir")?),
            cache_dir: PathBuf::from(self.get("paths.cache_dir")?),
        })
    }

    /// Every typed section at once; fails on the first invalid value.
    pub fn settings(&self) -> Result<Settings> {
        Ok(Settings {
            channel: self.channel()?,
            window: self.window()?,
            link: self.link()?,
            model: self.model()?,
            train: self.train()?,
            data: self.data()?,
            experiment: self.experiment()?,
            paths: self.paths()?,
            digest: self.digest(),
        })
    }
}

pub fn parse_range(v: &str) -> std::result::Result<(f64, f64), String> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
    let (lo, hi) = match v.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let x = num(v)?;
            (x, x)
        }
    };
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(format!("`{v}` is not a range lo:hi with lo <= hi"));
    }
    Ok((lo, hi))
}

/// Dataset sizes, velocity protocol and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_count: usize,
    pub val_count: usize,
    pub speed_kmh: (f64, f64),
    pub seed: u64,
    pub test_velocities: Vec<f64>,
    /// Held-out pairs per test velocity.
    pub test_pairs: usize,
    /// Held-out traces per test velocity, for link simulation.
    pub test_traces: usize,
    pub test_trace_steps: usize,
    pub test_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub noise_snr_db: Vec<f64>,
    pub few_shot_fraction: f64,
    pub data_scales: Vec<f64>,
    pub freeze_policies: Vec<FreezePolicy>,
    pub generalization_profile: PowerDelayProfile,
    pub link_eval: bool,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

/// Typed view of a resolved [`Config`].
#[derive(Clone, Debug)]
pub struct Settings {
    pub channel: ChannelConfig,
    pub window: Window,
    pub link: LinkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub experiment: ExperimentSettings,
    pub paths: Paths,
    pub digest: String,
}

//! Held-out test suites, evaluation, and the scripted experiment grid.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::amc::{link_stats, run_link, Forecaster, LinkRecord, LinkStats};
use crate::channel::{generate_traces, sample_dataset, ChannelConfig, Dataset, DatasetSpec, TraceSet};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::files;
use crate::predictors::{nmse_db, BackboneKind, FreezePolicy, LastValue, ModelConfig, ModelKind, NeuralPredictor, Predictor};
use crate::train::{train, PairSet, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    VelocitySweep,
    NoiseRobustness,
    FewShot,
    Generalization,
    AblationModules,
    AblationDataScale,
    AblationFinetune,
    CostReport,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::VelocitySweep,
        ExperimentKind::NoiseRobustness,
        ExperimentKind::FewShot,
        ExperimentKind::Generalization,
        ExperimentKind::AblationModules,
        ExperimentKind::AblationDataScale,
        ExperimentKind::AblationFinetune,
        ExperimentKind::CostReport,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::VelocitySweep => "velocity-sweep",
            ExperimentKind::NoiseRobustness => "noise-robustness",
            ExperimentKind::FewShot => "few-shot",
            ExperimentKind::Generalization => "generalization",
            ExperimentKind::AblationModules => "ablation-modules",
            ExperimentKind::AblationDataScale => "ablation-data-scale",
            ExperimentKind::AblationFinetune => "ablation-finetune",
            ExperimentKind::CostReport => "cost-report",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown experiment `{s}` (expected one of: {})", names.join(", ")))
        })
    }
}

/// Mixes `parts` into `base` with splitmix64 steps.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Velocity label used in file names and report conditions.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Training and validation datasets for experiment seed `seed`, both cut to
/// `fraction` of their configured size.
pub fn training_data(s: &Settings, channel: &ChannelConfig, seed: u64, fraction: f64) -> Result<(Dataset, Dataset)> {
    let spec = |count, part| DatasetSpec {
        channel: channel.clone(),
        speed_kmh: s.data.speed_kmh,
        window: s.window,
        count,
        seed: derive_seed(s.data.seed, &[seed, part]),
    };
    let cut = |n: usize| ((n as f64 * fraction).ceil() as usize).clamp(n.min(1), n);
    let train = sample_dataset(&spec(cut(s.data.train_count), 0))?;
    let val = sample_dataset(&spec(cut(s.data.val_count), 1))?;
    Ok((train, val))
}

/// Held-out pairs and traces at one velocity.
#[derive(Clone, Debug)]
pub struct TestPoint {
    pub velocity_kmh: f64,
    pub pairs: Dataset,
    pub traces: TraceSet,
}

#[derive(Clone, Debug)]
pub struct TestSuite {
    pub points: Vec<TestPoint>,
}

pub fn pairs_file(dir: &Path, v: f64) -> PathBuf {
    dir.join(format!("test_pairs_v{}.amct", fmt_num(v)))
}

pub fn traces_file(dir: &Path, v: f64) -> PathBuf {
    dir.join(format!("test_traces_v{}.amct", fmt_num(v)))
}

impl TestSuite {
    pub fn generate(s: &Settings, channel: &ChannelConfig, velocities: &[f64], seed: u64) -> Result<Self> {
        let points = velocities
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let pairs = sample_dataset(&DatasetSpec {
                    channel: channel.clone(),
                    speed_kmh: (v, v),
                    window: s.window,
                    count: s.data.test_pairs,
                    seed: derive_seed(s.data.test_seed, &[seed, i as u64, 0]),
                })?;
                let steps = s.data.test_trace_steps.max(s.window.span());
                let traces = generate_traces(channel, v, s.data.test_traces, steps, derive_seed(s.data.test_seed, &[seed, i as u64, 1]))?;
                Ok(TestPoint { velocity_kmh: v, pairs, traces })
            })
            .collect::<Result<_>>()?;
        Ok(Self { points })
    }

    pub fn save(&self, dir: &Path, digest: &str) -> Result<()> {
        for p in &self.points {
            files::save_dataset(&pairs_file(dir, p.velocity_kmh), &p.pairs, digest)?;
            files::save_traces(&traces_file(dir, p.velocity_kmh), &p.traces, digest)?;
        }
        Ok(())
    }

    /// Loads every velocity's pair and trace files, naming all that are absent.
    pub fn load(dir: &Path, velocities: &[f64]) -> Result<Self> {
        let missing: Vec<String> = velocities
            .iter()
            .flat_map(|&v| [pairs_file(dir, v), traces_file(dir, v)])
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("missing test files: {}", missing.join(", "))));
        }
        let points = velocities
            .iter()
            .map(|&v| {
                let (pairs, _) = files::load_dataset(&pairs_file(dir, v))?;
                let (traces, _) = files::load_traces(&traces_file(dir, v))?;
                Ok(TestPoint { velocity_kmh: v, pairs, traces })
            })
            .collect::<Result<_>>()?;
        Ok(Self { points })
    }

    /// All points' pairs in one set.
    pub fn all_pairs(&self) -> Result<PairSet> {
        let mut sets = self.points.iter().map(|p| PairSet::from_dataset(&p.pairs));
        let mut out = sets.next().ok_or_else(|| Error::Invalid("empty test suite".into()))?;
        for s in sets {
            if (s.history, s.subcarriers) != (out.history, out.subcarriers) {
                return Err(Error::Invalid("test points disagree on L or K".into()));
            }
            out.histories.extend(s.histories);
            out.targets.extend(s.targets);
            out.velocities.extend(s.velocities);
        }
        Ok(out)
    }
}

/// Squared-error and energy sums, so NMSE can be pooled over any union of sets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NmseAccumulator {
    pub err: f64,
    pub energy: f64,
    pub sample_sum: f64,
    pub samples: usize,
}

impl NmseAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], k: usize) {
        for (p, t) in pred.chunks(k).zip(truth.chunks(k)) {
            let e: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            let g: f64 = t.iter().map(|b| b * b).sum();
            self.err += e;
            self.energy += g;
            self.sample_sum += if g > 0.0 { e / g } else { 0.0 };
            self.samples += 1;
        }
    }

    pub fn merge(&mut self, o: &NmseAccumulator) {
        self.err += o.err;
        self.energy += o.energy;
        self.sample_sum += o.sample_sum;
        self.samples += o.samples;
    }

    /// Total squared error over total target energy.
    pub fn pooled(&self) -> f64 {
        self.err / self.energy
    }

    pub fn sample_mean(&self) -> f64 {
        self.sample_sum / self.samples as f64
    }
}

fn forecast_pairs(forecaster: Forecaster<'_>, set: &PairSet) -> Result<Vec<f64>> {
    match forecaster {
        Forecaster::Genie => Ok(set.targets.clone()),
        Forecaster::Model(p) => p.predict_batch(set.batch()?),
    }
}

pub fn nmse_of(forecaster: Forecaster<'_>, set: &PairSet) -> Result<NmseAccumulator> {
    let pred = forecast_pairs(forecaster, set)?;
    let mut acc = NmseAccumulator::default();
    acc.add(&pred, &set.targets, set.subcarriers);
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct PointEval {
    pub velocity_kmh: f64,
    pub nmse: NmseAccumulator,
    pub link: Option<LinkStats>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub points: Vec<PointEval>,
    pub overall_nmse: NmseAccumulator,
    pub overall_link: Option<LinkStats>,
}

/// NMSE on every point's pairs and, with `link_eval`, the closed loop on every
/// trace. Trace `i` at point `j` always uses the same block-error draws, so
/// forecasters are compared on common random numbers.
pub fn evaluate(forecaster: Forecaster<'_>, suite: &TestSuite, s: &Settings, link_seed: u64, link_eval: bool) -> Result<Evaluation> {
    let mut points = Vec::with_capacity(suite.points.len());
    let mut overall = NmseAccumulator::default();
    let mut all_records: Vec<LinkRecord> = Vec::new();
    for (j, p) in suite.points.iter().enumerate() {
        let nmse = nmse_of(forecaster, &PairSet::from_dataset(&p.pairs))?;
        overall.merge(&nmse);
        let link = if link_eval && !p.traces.traces.is_empty() {
            let mut records = Vec::new();
            for (i, trace) in p.traces.traces.iter().enumerate() {
                let run = run_link(trace, forecaster, &s.window, &s.link, derive_seed(link_seed, &[j as u64, i as u64]))?;
                records.extend(run.records);
            }
            let stats = link_stats(&records, &s.link)?;
            all_records.extend(records);
            Some(stats)
        } else {
            None
        };
        points.push(PointEval { velocity_kmh: p.velocity_kmh, nmse, link });
    }
    let overall_link = if all_records.is_empty() { None } else { Some(link_stats(&all_records, &s.link)?) };
    Ok(Evaluation { points, overall_nmse: overall, overall_link })
}

fn nmse_metrics(acc: &NmseAccumulator) -> Vec<(&'static str, f64)> {
    vec![("nmse_db", nmse_db(acc.pooled())), ("nmse_sample_db", nmse_db(acc.sample_mean()))]
}

fn link_metrics(l: &LinkStats) -> Vec<(&'static str, f64)> {
    let mut m = Vec::new();
    if let Some(b) = l.mean_bler {
        m.push(("bler", b));
    }
    if let Some(b) = l.block_error_rate {
        m.push(("block_error_rate", b));
    }
    m.push(("throughput_mbps", l.realized_bps / 1e6));
    m.push(("expected_throughput_mbps", l.expected_bps / 1e6));
    m.push(("no_tx_fraction", l.no_tx_fraction));
    m
}

impl Evaluation {
    /// `(condition, metric, value)` per velocity (`v=<km/h>`) and pooled (`all`).
    pub fn metrics(&self) -> Vec<(String, &'static str, f64)> {
        let mut out = Vec::new();
        for p in &self.points {
            let cond = format!("v={}", fmt_num(p.velocity_kmh));
            out.extend(nmse_metrics(&p.nmse).into_iter().map(|(m, v)| (cond.clone(), m, v)));
            if let Some(l) = &p.link {
                out.extend(link_metrics(l).into_iter().map(|(m, v)| (cond.clone(), m, v)));
            }
        }
        out.extend(self.overall_metrics().into_iter().map(|(m, v)| ("all".to_string(), m, v)));
        out
    }

    pub fn overall_metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = nmse_metrics(&self.overall_nmse);
        if let Some(l) = &self.overall_link {
            out.extend(link_metrics(l));
        }
        out
    }
}

/// One metric value from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub condition: String,
    pub model: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

impl Measurement {
    pub fn new(condition: impl Into<String>, model: impl Into<String>, metric: impl Into<String>, seed: u64, value: f64) -> Self {
        Self { condition: condition.into(), model: model.into(), metric: metric.into(), seed, value }
    }
}

/// Seed aggregate of one `(condition, model, metric)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

pub const REPORT_CSV_HEADER: &str = "experiment,condition,model,metric,mean,min,max,n";

impl ExperimentReport {
    /// Aggregates over seeds; rows keep the order in which cells first appear.
    pub fn from_measurements(experiment: &str, digest: &str, seeds: &[u64], ms: &[Measurement], notes: Vec<String>) -> Self {
        let mut rows: Vec<(ReportRow, f64)> = Vec::new();
        for m in ms {
            match rows.iter_mut().find(|(r, _)| r.condition == m.condition && r.model == m.model && r.metric == m.metric) {
                Some((r, sum)) => {
                    *sum += m.value;
                    r.n += 1;
                    r.min = r.min.min(m.value);
                    r.max = r.max.max(m.value);
                }
                None => rows.push((
                    ReportRow { condition: m.condition.clone(), model: m.model.clone(), metric: m.metric.clone(), mean: 0.0, min: m.value, max: m.value, n: 1 },
                    m.value,
                )),
            }
        }
        let rows = rows
            .into_iter()
            .map(|(mut r, sum)| {
                r.mean = sum / r.n as f64;
                r
            })
            .collect();
        Self { experiment: experiment.to_string(), digest: digest.to_string(), seeds: seeds.to_vec(), rows, notes }
    }

    pub fn get(&self, condition: &str, model: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition && r.model == model && r.metric == metric)
    }

    pub fn mean(&self, condition: &str, model: &str, metric: &str) -> Option<f64> {
        self.get(condition, model, metric).map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# experiment={} digest={} seeds={}\n", self.experiment, self.digest, seeds.join(";"));
        for n in &self.notes {
            out.push_str(&format!("# note: {n}\n"));
        }
        out.push_str(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{},{},{}\n", self.experiment, r.condition, r.model, r.metric, r.mean, r.min, r.max, r.n));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Invalid(format!("report CSV: {msg}"));
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let fields: Vec<(&str, &str)> = head.strip_prefix("# ").ok_or_else(|| bad("missing header comment".into()))?.split(' ').filter_map(|kv| kv.split_once('=')).collect();
        let field = |k: &str| fields.iter().find(|(key, _)| *key == k).map(|(_, v)| *v).ok_or_else(|| bad(format!("header lacks `{k}`")));
        let seeds_text = field("seeds")?;
        let seeds = if seeds_text.is_empty() {
            Vec::new()
        } else {
            seeds_text.split(';').map(|s| s.parse().map_err(|_| bad(format!("bad seed `{s}`")))).collect::<Result<_>>()?
        };
        let mut report = Self { experiment: field("experiment")?.to_string(), digest: field("digest")?.to_string(), seeds, rows: Vec::new(), notes: Vec::new() };
        let mut seen_header = false;
        for (i, line) in lines.enumerate() {
            if let Some(n) = line.strip_prefix("# note: ") {
                report.notes.push(n.to_string());
                continue;
            }
            if !seen_header {
                if line != REPORT_CSV_HEADER {
                    return Err(bad(format!("expected column header, found `{line}`")));
                }
                seen_header = true;
                continue;
            }
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 8 {
                return Err(bad(format!("line {}: expected 8 columns", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2)));
            report.rows.push(ReportRow {
                condition: c[1].to_string(),
                model: c[2].to_string(),
                metric: c[3].to_string(),
                mean: num(c[4])?,
                min: num(c[5])?,
                max: num(c[6])?,
                n: c[7].parse().map_err(|_| bad(format!("line {}: bad count", i + 2)))?,
            });
        }
        Ok(report)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let head = ["condition", "model", "metric", "mean", "min", "max", "n"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| [r.condition.clone(), r.model.clone(), r.metric.clone(), fmt_cell(r.mean), fmt_cell(r.min), fmt_cell(r.max), r.n.to_string()])
            .collect();
        let mut width: [usize; 7] = head.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| -> String {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i < 3 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("{}  (digest {}, seeds {})\n", self.experiment, self.digest, if seeds.is_empty() { "-".into() } else { seeds.join(",") });
        out += &line(&head.map(String::from));
        out += &line(&width.map(|w| "-".repeat(w)));
        for row in &cells {
            out += &line(row);
        }
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        out
    }

    /// One gnuplot data block per `(model, metric)`, separated by two blank
    /// lines so `index` selects them. Columns: x, mean, min, max, condition.
    pub fn gnuplot(&self) -> String {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.model.as_str(), r.metric.as_str())) {
                keys.push((&r.model, &r.metric));
            }
        }
        let mut out = format!("# experiment={} digest={}\n", self.experiment, self.digest);
        for (bi, (model, metric)) in keys.iter().enumerate() {
            if bi > 0 {
                out.push_str("\n\n");
            }
            out.push_str(&format!("# index {bi}: model={model} metric={metric}\n# x mean min max condition\n"));
            for (i, r) in self.rows.iter().filter(|r| r.model == *model && r.metric == *metric).enumerate() {
                let x = r.condition.rsplit('=').next().and_then(|v| v.parse::<f64>().ok()).map_or(i.to_string(), fmt_num);
                out.push_str(&format!("{x} {} {} {} \"{}\"\n", r.mean, r.min, r.max, r.condition));
            }
        }
        out
    }

    /// Writes `<experiment>.csv`, `.txt` and `.dat` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let base = dir.join(&self.experiment);
        let paths: Vec<PathBuf> = ["csv", "txt", "dat"].iter().map(|ext| base.with_extension(ext)).collect();
        files::write_bytes(&paths[0], self.to_csv().as_bytes())?;
        files::write_bytes(&paths[1], self.table().as_bytes())?;
        files::write_bytes(&paths[2], self.gnuplot().as_bytes())?;
        Ok(paths)
    }
}

fn fmt_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// What a job evaluates.
#[derive(Clone, Debug)]
enum Subject {
    Trained { label: String, model: ModelConfig, fraction: f64 },
    Np,
    Genie,
}

impl Subject {
    fn trained(label: impl Into<String>, model: ModelConfig) -> Self {
        Subject::Trained { label: label.into(), model, fraction: 1.0 }
    }

    fn label(&self) -> &str {
        match self {
            Subject::Trained { label, .. } => label,
            Subject::Np => "np",
            Subject::Genie => "genie",
        }
    }
}

#[derive(Clone, Debug)]
struct Job {
    seed: u64,
    /// Report condition override (data fraction, freeze policy).
    condition: Option<String>,
    subject: Subject,
}

#[derive(Default)]
struct JobOutput {
    measurements: Vec<Measurement>,
    notes: Vec<String>,
}

/// Options that affect how, not what, an experiment computes.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Trained checkpoints are reused from and stored in this directory.
    pub cache_dir: Option<PathBuf>,
}

fn cache_key(s: &Settings, model: &ModelConfig, channel: &ChannelConfig, seed: u64, fraction: f64) -> String {
    let text = format!(
        "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{}|{:?}|{}|{}|{}",
        model.to_metadata(),
        s.train,
        channel,
        s.window,
        s.data.speed_kmh,
        (s.data.train_count, s.data.val_count),
        s.data.seed,
        fraction,
        seed,
        crate::predictors::NORM_VERSION,
        env!("CARGO_PKG_VERSION"),
    );
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Trains `model` for experiment seed `seed` on `channel` data. Parameters are
/// rounded to checkpoint precision, so a cached checkpoint reproduces the
/// same predictions as a fresh run.
pub fn train_for_seed(
    s: &Settings,
    model: &ModelConfig,
    channel: &ChannelConfig,
    seed: u64,
    fraction: f64,
    control: &RunControl,
) -> Result<(NeuralPredictor, Option<TrainOutcome>)> {
    let ckpt = control.cache_dir.as_ref().map(|d| d.join(format!("model-{}.ckpt", cache_key(s, model, channel, seed, fraction))));
    if let Some(path) = ckpt.as_ref().filter(|p| p.exists()) {
        match NeuralPredictor::load(path) {
            Ok((m, _)) => {
                log::info!("event=cache_hit model={} seed={seed} path={}", model.kind, path.display());
                return Ok((m, None));
            }
            Err(e) => log::warn!("event=cache_unreadable path={} error=\"{e}\"", path.display()),
        }
    }
    let (train_ds, val_ds) = training_data(s, channel, seed, fraction)?;
    let mut net = NeuralPredictor::new(model, s.window.history, channel.subcarriers, derive_seed(s.train.seed, &[seed, 0]))?;
    let cfg = crate::train::TrainConfig { seed: derive_seed(s.train.seed, &[seed, 1]), ..s.train.clone() };
    let started = std::time::Instant::now();
    let outcome = train(&mut net, &PairSet::from_dataset(&train_ds), &PairSet::from_dataset(&val_ds), &cfg)?;
    net.round_to_checkpoint();
    log::info!(
        "event=trained model={} seed={seed} samples={} epochs={} best_epoch={} best_val_nmse_db={:.3} seconds={:.1}",
        model.kind,
        train_ds.len(),
        cfg.epochs,
        outcome.best_epoch,
        outcome.best_val_nmse.map_or(f64::NAN, nmse_db),
        started.elapsed().as_secs_f64()
    );
    if let Some(path) = ckpt {
        net.save(&path, &s.digest)?;
        let mut curve = Vec::new();
        outcome.write_csv(&mut curve).map_err(crate::error::io_err(&path))?;
        files::write_bytes(&path.with_extension("curve.csv"), &curve)?;
        files::write_bytes(&path.with_extension("seconds"), format!("{:.1}\n", started.elapsed().as_secs_f64()).as_bytes())?;
    }
    Ok((net, Some(outcome)))
}

/// Wall-clock training time recorded next to a cached checkpoint, if any.
pub fn cached_training_seconds(s: &Settings, model: &ModelConfig, channel: &ChannelConfig, seed: u64, fraction: f64, control: &RunControl) -> Option<f64> {
    let dir = control.cache_dir.as_ref()?;
    let path = dir.join(format!("model-{}.seconds", cache_key(s, model, channel, seed, fraction)));
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

fn jobs_for(kind: ExperimentKind, s: &Settings) -> Vec<Job> {
    let e = &s.experiment;
    let model_for = |k: ModelKind| if k == ModelKind::PatchNet { s.model.clone() } else { ModelConfig { kind: k, ..s.model.clone() } };
    let mut subjects: Vec<(Option<String>, Subject)> = Vec::new();
    let models = || e.models.iter().map(|&k| (None, Subject::trained(k.to_string(), model_for(k))));
    match kind {
        ExperimentKind::VelocitySweep | ExperimentKind::Generalization => {
            subjects.extend(models());
            subjects.push((None, Subject::Np));
            if e.link_eval {
                subjects.push((None, Subject::Genie));
            }
        }
        ExperimentKind::NoiseRobustness => {
            subjects.extend(models());
            subjects.push((None, Subject::Np));
        }
        ExperimentKind::FewShot => {
            for &k in &e.models {
                subjects.push((None, Subject::Trained { label: k.to_string(), model: model_for(k), fraction: e.few_shot_fraction }));
            }
            subjects.push((None, Subject::Np));
        }
        ExperimentKind::AblationModules => {
            let m = &s.model;
            subjects.push((None, Subject::trained("full", m.clone())));
            subjects.push((None, Subject::trained("w/o-sa", ModelConfig { sa_iterations: 0, ..m.clone() })));
            subjects.push((None, Subject::trained("w/o-patching", ModelConfig { patch: 1, ..m.clone() })));
            subjects.push((None, Subject::trained("w/o-backbone", ModelConfig { backbone: BackboneKind::Identity, ..m.clone() })));
            subjects.push((None, Subject::Np));
        }
        ExperimentKind::AblationDataScale => {
            for &f in &e.data_scales {
                let label = s.model.kind.to_string();
                subjects.push((Some(format!("scale={}", fmt_num(f))), Subject::Trained { label, model: s.model.clone(), fraction: f }));
            }
        }
        ExperimentKind::AblationFinetune => {
            for &p in &e.freeze_policies {
                subjects.push((Some(format!("policy={p}")), Subject::trained(s.model.kind.to_string(), ModelConfig { freeze: p, ..s.model.clone() })));
            }
        }
        ExperimentKind::CostReport => {}
    }
    e.seeds.iter().flat_map(|&seed| subjects.iter().map(move |(c, sub)| Job { seed, condition: c.clone(), subject: sub.clone() })).collect()
}

fn run_job(kind: ExperimentKind, s: &Settings, job: &Job, control: &RunControl) -> Result<JobOutput> {
    let mut out = JobOutput::default();
    let seed = job.seed;
    let label = job.subject.label().to_string();
    let test_channel = match kind {
        ExperimentKind::Generalization => ChannelConfig { profile: s.experiment.generalization_profile.clone(), ..s.channel.clone() },
        _ => s.channel.clone(),
    };
    let trained = match &job.subject {
        Subject::Trained { model, fraction, .. } => match train_for_seed(s, model, &s.channel, seed, *fraction, control) {
            Ok((m, _)) => Some(m),
            Err(Error::NonFiniteLoss { epoch, batch }) if model.kind != ModelKind::PatchNet => {
                out.notes.push(format!("{label} seed {seed} diverged (non-finite loss at epoch {epoch}, batch {batch}); no rows"));
                return Ok(out);
            }
            Err(e) => return Err(e),
        },
        _ => None,
    };
    let np = LastValue;
    let forecaster = match (&job.subject, &trained) {
        (Subject::Genie, _) => Forecaster::Genie,
        (_, Some(m)) => Forecaster::Model(m as &dyn Predictor),
        _ => Forecaster::Model(&np as &dyn Predictor),
    };
    let suite = TestSuite::generate(s, &test_channel, &s.data.test_velocities, seed)?;
    let link_seed = derive_seed(s.data.test_seed, &[seed, 2]);
    let mut push = |cond: &str, metric: &str, v: f64| out.measurements.push(Measurement::new(cond, label.as_str(), metric, seed, v));
    match kind {
        ExperimentKind::VelocitySweep | ExperimentKind::FewShot | ExperimentKind::Generalization => {
            let ev = evaluate(forecaster, &suite, s, link_seed, s.experiment.link_eval)?;
            for (c, m, v) in ev.metrics() {
                push(&c, m, v);
            }
        }
        ExperimentKind::NoiseRobustness => {
            let pairs = suite.all_pairs()?;
            for (m, v) in nmse_metrics(&nmse_of(forecaster, &pairs)?) {
                push("clean", m, v);
            }
            for &snr in &s.experiment.noise_snr_db {
                let noisy = pairs.with_noise(snr, derive_seed(s.data.test_seed, &[seed, 3, snr.to_bits()]));
                let pred = forecast_pairs(forecaster, &noisy)?;
                let mut acc = NmseAccumulator::default();
                acc.add(&pred, &pairs.targets, pairs.subcarriers);
                for (m, v) in nmse_metrics(&acc) {
                    push(&format!("snr={}", fmt_num(snr)), m, v);
                }
            }
        }
        ExperimentKind::AblationModules | ExperimentKind::AblationDataScale | ExperimentKind::AblationFinetune => {
            let link_eval = s.experiment.link_eval && kind == ExperimentKind::AblationModules;
            let ev = evaluate(forecaster, &suite, s, link_seed, link_eval)?;
            let cond = job.condition.clone().unwrap_or_else(|| "all".into());
            for (m, v) in ev.overall_metrics() {
                push(&cond, m, v);
            }
            if let Some(m) = &trained {
                let r = m.param_report();
                push(&cond, "trainable_params", r.trainable as f64);
                push(&cond, "total_params", r.total as f64);
            }
        }
        ExperimentKind::CostReport => {}
    }
    Ok(out)
}

/// `100 (x - ref) / |ref|` on dB values and `100 (x - ref) / ref` on linear
/// NMSE, for every cell of `metric = nmse_db` against the reference condition
/// of the same seed and model.
fn add_increase_rows(ms: &mut Vec<Measurement>, reference: &str) {
    let extra: Vec<Measurement> = ms
        .iter()
        .filter(|m| m.metric == "nmse_db")
        .filter_map(|m| {
            let r = ms.iter().find(|r| r.metric == "nmse_db" && r.condition == reference && r.seed == m.seed && r.model == m.model)?;
            let db = 100.0 * (m.value - r.value) / r.value.abs();
            let lin = 100.0 * (10f64.powf(m.value / 10.0) - 10f64.powf(r.value / 10.0)) / 10f64.powf(r.value / 10.0);
            Some([
                Measurement::new(&m.condition, &m.model, "nmse_increase_db_pct", m.seed, db),
                Measurement::new(&m.condition, &m.model, "nmse_increase_lin_pct", m.seed, lin),
            ])
        })
        .flatten()
        .collect();
    ms.extend(extra);
}

/// Parameter counts for the configured patch network under each freeze
/// policy and for the recurrent baselines.
pub fn cost_report(s: &Settings) -> Result<ExperimentReport> {
    let (l, k) = (s.window.history, s.channel.subcarriers);
    let mut ms = Vec::new();
    let mut policies = s.experiment.freeze_policies.clone();
    if policies.is_empty() {
        policies.push(s.model.freeze);
    }
    let mut add = |cond: String, model: String, net: &NeuralPredictor| {
        let r = net.param_report();
        let base = r.backbone + r.embedding;
        let pct = if base > 0 { 100.0 * r.backbone_trainable as f64 / base as f64 } else { 0.0 };
        for (metric, v) in [
            ("total_params", r.total as f64),
            ("trainable_params", r.trainable as f64),
            ("sa_params", r.sa as f64),
            ("embedding_params", r.embedding as f64),
            ("backbone_params", r.backbone as f64),
            ("backbone_trainable_params", r.backbone_trainable as f64),
            ("head_params", r.head as f64),
            ("recurrent_params", r.recurrent as f64),
            ("trainable_backbone_pct", pct),
        ] {
            ms.push(Measurement::new(cond.clone(), model.clone(), metric, 0, v));
        }
    };
    for p in policies {
        let cfg = ModelConfig { kind: ModelKind::PatchNet, freeze: p, ..s.model.clone() };
        add(format!("policy={p}"), "patchnet".into(), &NeuralPredictor::new(&cfg, l, k, 0)?);
    }
    for kind in [ModelKind::Rnn, ModelKind::Lstm, ModelKind::Gru] {
        let cfg = ModelConfig { kind, ..s.model.clone() };
        add("-".into(), kind.to_string(), &NeuralPredictor::new(&cfg, l, k, 0)?);
    }
    let notes = vec!["trainable_backbone_pct is trainable backbone parameters over all backbone plus embedding parameters".into()];
    Ok(ExperimentReport::from_measurements(ExperimentKind::CostReport.as_str(), &s.digest, &[], &ms, notes))
}

fn notes_for(kind: ExperimentKind, s: &Settings) -> Vec<String> {
    let mut n = vec!["nmse_db pools squared error and target energy over all pairs; nmse_sample_db averages per-pair NMSE".to_string()];
    match kind {
        ExperimentKind::VelocitySweep | ExperimentKind::FewShot | ExperimentKind::Generalization | ExperimentKind::AblationModules
            if s.experiment.link_eval =>
        {
            n.push("throughput_mbps counts delivered blocks; expected_throughput_mbps weights every block by 1 - BLER".into());
        }
        ExperimentKind::AblationDataScale | ExperimentKind::AblationFinetune => {
            n.push("NMSE increase is given on the dB scale (nmse_increase_db_pct) and the linear scale (nmse_increase_lin_pct); the reference does not say which".into());
        }
        _ => {}
    }
    match kind {
        ExperimentKind::FewShot => n.push(format!("trained on {}% of the training and validation sets", fmt_num(100.0 * s.experiment.few_shot_fraction))),
        ExperimentKind::Generalization => {
            n.push(format!("trained on profile {}, tested on profile {}", s.channel.profile.name, s.experiment.generalization_profile.name))
        }
        _ => {}
    }
    n
}

/// Runs every job of the experiment grid on a pool of `experiment.jobs`
/// workers and merges the results in job order.
pub fn run_experiment(kind: ExperimentKind, s: &Settings, control: &RunControl) -> Result<ExperimentReport> {
    if kind == ExperimentKind::CostReport {
        return cost_report(s);
    }
    let jobs = jobs_for(kind, s);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.experiment.jobs).build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("event=experiment_start kind={kind} jobs={} workers={} digest={}", jobs.len(), pool.current_num_threads(), s.digest);
    let results: Vec<Result<JobOutput>> = pool.install(|| jobs.par_iter().map(|j| run_job(kind, s, j, control)).collect());
    let mut ms = Vec::new();
    let mut notes = notes_for(kind, s);
    for r in results {
        let r = r?;
        ms.extend(r.measurements);
        notes.extend(r.notes);
    }
    match kind {
        ExperimentKind::AblationDataScale => {
            if let Some(top) = s.experiment.data_scales.iter().copied().reduce(f64::max) {
                add_increase_rows(&mut ms, &format!("scale={}", fmt_num(top)));
            }
        }
        ExperimentKind::AblationFinetune => {
            let reference = if s.experiment.freeze_policies.contains(&FreezePolicy::LnOnly) { FreezePolicy::LnOnly } else { s.experiment.freeze_policies[0] };
            add_increase_rows(&mut ms, &format!("policy={reference}"));
        }
        _ => {}
    }
    Ok(ExperimentReport::from_measurements(kind.as_str(), &s.digest, &s.experiment.seeds, &ms, notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("sweep".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2, 3]), derive_seed(5, &[2, 3]));
    }

    #[test]
    fn report_aggregates_and_round_trips() {
        let ms = vec![
            Measurement::new("v=40", "np", "nmse_db", 1, -10.0),
            Measurement::new("v=40", "np", "nmse_db", 2, -12.0),
            Measurement::new("v=70", "np", "nmse_db", 1, -8.5),
        ];
        let r = ExperimentReport::from_measurements("velocity-sweep", "abc", &[1, 2], &ms, vec!["a note".into()]);
        let row = r.get("v=40", "np", "nmse_db").unwrap();
        assert_eq!((row.mean, row.min, row.max, row.n), (-11.0, -12.0, -10.0, 2));
        assert_eq!(r.rows[1].condition, "v=70");
        let back = ExperimentReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert!(r.table().contains("v=40"));
        let dat = r.gnuplot();
        assert!(dat.contains("40 -11 -12 -10 \"v=40\""), "{dat}");
    }

    #[test]
    fn increase_rows_use_both_scales() {
        let mut ms = vec![Measurement::new("scale=1", "m", "nmse_db", 1, -20.0), Measurement::new("scale=0.2", "m", "nmse_db", 1, -10.0)];
        add_increase_rows(&mut ms, "scale=1");
        let find = |c: &str, m: &str| ms.iter().find(|x| x.condition == c && x.metric == m).unwrap().value;
        assert_eq!(find("scale=0.2", "nmse_increase_db_pct"), 50.0);
        assert!((find("scale=0.2", "nmse_increase_lin_pct") - 900.0).abs() < 1e-9);
        assert_eq!(find("scale=1", "nmse_increase_db_pct"), 0.0);
    }

    #[test]
    fn accumulator_matches_direct_metrics() {
        let truth = [1.0, 2.0, -3.0, 4.0];
        let pred = [1.5, 2.0, -2.0, 3.0];
        let mut acc = NmseAccumulator::default();
        acc.add(&pred, &truth, 2);
        assert!((acc.pooled() - crate::predictors::pooled_nmse(&pred, &truth).unwrap()).abs() < 1e-15);
        assert!((acc.sample_mean() - crate::predictors::mean_nmse(&pred, &truth, 2).unwrap()).abs() < 1e-15);
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use amc_lab::amc::{link_stats, run_link, write_records_csv, Forecaster};
use amc_lab::channel::{generate_traces, sample_dataset, DatasetSpec};
use amc_lab::config::{Config, Settings};
use amc_lab::experiments::{evaluate, run_experiment, training_data, ExperimentKind, ExperimentReport, Measurement, RunControl, TestSuite};
use amc_lab::files;
use amc_lab::gradsuite;
use amc_lab::predictors::{nmse_db, LastValue, NeuralPredictor};
use amc_lab::train::{train, PairSet};

/// Link-adaptation laboratory: SINR traces, predictors and the closed AMC loop.
#[derive(Parser, Debug)]
#[command(name = "amclab", version, arg_required_else_help = true)]
struct Cli {
    /// Config file layered over the bundled defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for experiment grids (0 = logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a pair dataset, a trace file, or a per-velocity test suite.
    GenData(GenData),
    /// Train a predictor on pair datasets.
    Train(TrainArgs),
    /// NMSE and link metrics per velocity on a test suite.
    Evaluate(EvaluateArgs),
    /// Run the closed loop on one trace and write per-TTI records.
    Simulate(SimulateArgs),
    /// Run one experiment grid and write its report.
    Experiment(ExperimentArgs),
    /// Render a report CSV as a text table and gnuplot data.
    Report(ReportArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradCheckArgs),
    /// Print the header of a trace, dataset, checkpoint or report file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenData {
    /// Channel profile (uma, umi, flat).
    #[arg(long)]
    profile: Option<String>,
    /// Velocity range in km/h, `lo:hi` or a single value.
    #[arg(long, value_name = "LO:HI")]
    speed_range: Option<String>,
    /// Pairs, traces (with --traces) or suite pairs per velocity (with --test-suite).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write traces at a single velocity instead of pairs.
    #[arg(long, conflicts_with = "test_suite")]
    traces: bool,
    /// TTIs per trace.
    #[arg(long)]
    steps: Option<usize>,
    /// Write held-out pair and trace files for every test velocity into the
    /// --out directory; --seed selects the experiment seed.
    #[arg(long)]
    test_suite: bool,
    /// Write training and validation sets (train.amct, val.amct) into the
    /// --out directory for experiment seed --seed.
    #[arg(long, conflicts_with_all = ["traces", "test_suite"])]
    train_split: bool,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    #[arg(long, value_name = "FILE")]
    val: PathBuf,
    /// Model kind (patchnet, rnn, lstm, gru).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.curve.csv`.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ForecasterArgs {
    /// Predictor checkpoint.
    #[arg(long, value_name = "CKPT", conflicts_with = "baseline")]
    predictor: Option<PathBuf>,
    /// Built-in forecaster: np (last value) or genie.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    forecaster: ForecasterArgs,
    /// Directory with per-velocity test files; defaults to paths.data_dir.
    #[arg(long, value_name = "DIR")]
    test_dir: Option<PathBuf>,
    /// Block-error draw seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Skip the closed-loop link evaluation.
    #[arg(long)]
    no_link: bool,
    /// Report CSV; prints the table to stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Trace within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    forecaster: ForecasterArgs,
    /// Measurement period in TTIs.
    #[arg(long)]
    tm: Option<usize>,
    /// Feedback delay in TTIs.
    #[arg(long)]
    td: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    kind: String,
    /// Output directory; defaults to paths.out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Train every model afresh instead of reusing cached checkpoints.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    csv: PathBuf,
    /// Writes PREFIX.txt and PREFIX.dat; prints the table when absent.
    #[arg(long, value_name = "PREFIX")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Tiny configuration (the only one supported).
    #[arg(long)]
    tiny: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    file: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<amc_lab::Error> for Failure {
    fn from(e: amc_lab::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("AMCLAB_LOG")
        .format(|buf, rec| writeln!(buf, "{} {} {}", buf.timestamp_millis(), rec.level(), rec.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

/// Resolves the layered config with subcommand flags applied as overrides.
fn resolve(cli: &Cli, extra: &[(String, String)]) -> Outcome<(Config, Settings)> {
    let mut sets = cli.sets.clone();
    sets.extend(extra.iter().map(|(k, v)| format!("{k}={v}")));
    if let Some(j) = cli.jobs {
        sets.push(format!("experiment.jobs={j}"));
    }
    let cfg = Config::load(cli.config.as_deref(), &sets).map_err(|e| Failure::Usage(e.to_string()))?;
    let settings = cfg.settings().map_err(|e| Failure::Usage(e.to_string()))?;
    log::info!("event=config digest={} file={}", settings.digest, cli.config.as_ref().map_or("-".into(), |p| p.display().to_string()));
    Ok((cfg, settings))
}

fn opt<T: ToString>(key: &str, v: &Option<T>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), v.to_string()))
}

fn gen_data(cli: &Cli, a: &GenData) -> Outcome<()> {
    let (count_key, seed_key) = match (a.traces, a.test_suite, a.train_split) {
        (true, _, _) => ("data.test_traces", "data.test_seed"),
        (_, true, _) => ("data.test_pairs", "data.test_seed"),
        (_, _, true) => ("data.train_count", "data.seed"),
        _ => ("data.train_count", "data.seed"),
    };
    let extra: Vec<(String, String)> = [
        opt("channel.profile", &a.profile),
        opt("data.speed_kmh", &a.speed_range),
        opt(count_key, &a.count),
        if a.test_suite || a.train_split { None } else { opt(seed_key, &a.seed) },
        opt("data.test_trace_steps", &a.steps),
    ]
    .into_iter()
    .flatten()
    .collect();
    let (_, s) = resolve(cli, &extra)?;
    if a.test_suite {
        let seed = a.seed.unwrap_or(s.experiment.seeds[0]);
        let suite = TestSuite::generate(&s, &s.channel, &s.data.test_velocities, seed)?;
        suite.save(&a.out, &s.digest)?;
        log::info!("event=wrote kind=test-suite dir={} velocities={} seed={seed}", a.out.display(), suite.points.len());
    } else if a.train_split {
        let seed = a.seed.unwrap_or(s.experiment.seeds[0]);
        let (tr, va) = training_data(&s, &s.channel, seed, 1.0)?;
        files::save_dataset(&a.out.join("train.amct"), &tr, &s.digest)?;
        files::save_dataset(&a.out.join("val.amct"), &va, &s.digest)?;
        log::info!("event=wrote kind=train-split dir={} train={} val={} seed={seed}", a.out.display(), tr.len(), va.len());
    } else if a.traces {
        let (lo, hi) = s.data.speed_kmh;
        if lo != hi {
            return Err(Failure::Usage(format!("--traces needs a single velocity, got speed range {lo}:{hi}")));
        }
        let steps = s.data.test_trace_steps;
        let set = generate_traces(&s.channel, lo, s.data.test_traces, steps, s.data.test_seed)?;
        files::save_traces(&a.out, &set, &s.digest)?;
        log::info!("event=wrote kind=traces path={} count={} steps={steps} velocity_kmh={lo}", a.out.display(), set.traces.len());
    } else {
        let spec = DatasetSpec { channel: s.channel.clone(), speed_kmh: s.data.speed_kmh, window: s.window, count: s.data.train_count, seed: s.data.seed };
        let ds = sample_dataset(&spec)?;
        files::save_dataset(&a.out, &ds, &s.digest)?;
        log::info!("event=wrote kind=pairs path={} count={}", a.out.display(), ds.len());
    }
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Outcome<()> {
    let extra: Vec<_> = [opt("model.kind", &a.model), opt("train.epochs", &a.epochs), opt("train.seed", &a.seed)].into_iter().flatten().collect();
    let (_, s) = resolve(cli, &extra)?;
    let (tr, tr_digest) = files::load_dataset(&a.train)?;
    let (va, _) = files::load_dataset(&a.val)?;
    if tr_digest != s.digest {
        log::warn!("event=digest_mismatch file={} file_digest={tr_digest} config_digest={}", a.train.display(), s.digest);
    }
    let mut net = NeuralPredictor::new(&s.model, tr.window.history, tr.subcarriers, s.train.seed)?;
    let report = net.param_report();
    log::info!("event=model kind={} total_params={} trainable_params={}", s.model.kind, report.total, report.trainable);
    let outcome = train(&mut net, &PairSet::from_dataset(&tr), &PairSet::from_dataset(&va), &s.train)?;
    net.save(&a.out, &s.digest)?;
    let curve_path = a.curve.clone().unwrap_or_else(|| a.out.with_extension("curve.csv"));
    let mut curve = format!("# digest={}\n", s.digest).into_bytes();
    outcome.write_csv(&mut curve).context("formatting loss curve")?;
    files::write_bytes(&curve_path, &curve)?;
    log::info!(
        "event=trained checkpoint={} best_epoch={} best_val_nmse_db={:.3}",
        a.out.display(),
        outcome.best_epoch,
        outcome.best_val_nmse.map_or(f64::NAN, nmse_db)
    );
    Ok(())
}

enum Loaded {
    Net(NeuralPredictor),
    Np(LastValue),
    Genie,
}

impl Loaded {
    fn forecaster(&self) -> Forecaster<'_> {
        match self {
            Loaded::Net(n) => Forecaster::Model(n),
            Loaded::Np(n) => Forecaster::Model(n),
            Loaded::Genie => Forecaster::Genie,
        }
    }
}

fn load_forecaster(a: &ForecasterArgs) -> Outcome<Loaded> {
    match (&a.predictor, a.baseline.as_deref()) {
        (Some(p), _) => Ok(Loaded::Net(NeuralPredictor::load(p)?.0)),
        (None, Some("np")) => Ok(Loaded::Np(LastValue)),
        (None, Some("genie")) => Ok(Loaded::Genie),
        (None, Some(other)) => Err(Failure::Usage(format!("unknown baseline `{other}` (expected np or genie)"))),
        (None, None) => Err(Failure::Usage("one of --predictor or --baseline is required".into())),
    }
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Outcome<()> {
    let (_, s) = resolve(cli, &[])?;
    let f = load_forecaster(&a.forecaster)?;
    let dir = a.test_dir.clone().unwrap_or_else(|| s.paths.data_dir.clone());
    let suite = TestSuite::load(&dir, &s.data.test_velocities)?;
    let ev = evaluate(f.forecaster(), &suite, &s, a.seed, !a.no_link)?;
    let name = f.forecaster().name().to_string();
    let ms: Vec<Measurement> = ev.metrics().into_iter().map(|(c, m, v)| Measurement::new(c, name.as_str(), m, a.seed, v)).collect();
    let report = ExperimentReport::from_measurements("evaluate", &s.digest, &[a.seed], &ms, Vec::new());
    match &a.out {
        Some(p) => files::write_bytes(p, report.to_csv().as_bytes())?,
        None => print!("{}", report.table()),
    }
    Ok(())
}

fn simulate_cmd(cli: &Cli, a: &SimulateArgs) -> Outcome<()> {
    let extra: Vec<_> = [opt("timing.measurement_period", &a.tm), opt("timing.feedback_delay", &a.td)].into_iter().flatten().collect();
    let (_, s) = resolve(cli, &extra)?;
    let f = load_forecaster(&a.forecaster)?;
    let (set, _) = files::load_traces(&a.trace)?;
    let trace = set.traces.get(a.index).ok_or_else(|| Failure::Usage(format!("trace index {} out of range ({} traces)", a.index, set.traces.len())))?;
    let mut window = s.window;
    if let Loaded::Net(n) = &f {
        window.history = n.history();
    }
    let run = run_link(trace, f.forecaster(), &window, &s.link, a.seed)?;
    let stats = link_stats(&run.records, &s.link)?;
    let mut out = format!("# digest={} seed={} forecaster={}\n", s.digest, a.seed, f.forecaster().name()).into_bytes();
    write_records_csv(&mut out, &run.records).context("formatting records")?;
    files::write_bytes(&a.out, &out)?;
    log::info!(
        "event=simulated records={} mean_bler={} throughput_mbps={:.4} out={}",
        stats.records,
        stats.mean_bler.map_or("none".into(), |b| format!("{b:.4}")),
        stats.realized_bps / 1e6,
        a.out.display()
    );
    Ok(())
}

fn experiment_cmd(cli: &Cli, a: &ExperimentArgs) -> Outcome<()> {
    let kind: ExperimentKind = a.kind.parse().map_err(|e: amc_lab::Error| Failure::Usage(e.to_string()))?;
    let (_, s) = resolve(cli, &[])?;
    let out = a.out.clone().unwrap_or_else(|| s.paths.out_dir.clone());
    let control = RunControl { cache_dir: (!a.no_cache).then(|| s.paths.cache_dir.clone()) };
    let report = run_experiment(kind, &s, &control)?;
    let paths = report.write(&out)?;
    print!("{}", report.table());
    for p in paths {
        log::info!("event=wrote path={}", p.display());
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Outcome<()> {
    let text = std::fs::read_to_string(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let report = ExperimentReport::parse_csv(&text)?;
    match &a.out {
        Some(prefix) => {
            let with = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
            files::write_bytes(&with("txt"), report.table().as_bytes())?;
            files::write_bytes(&with("dat"), report.gnuplot().as_bytes())?;
        }
        None => print!("{}", report.table()),
    }
    Ok(())
}

fn grad_check_cmd(a: &GradCheckArgs) -> Outcome<bool> {
    if !a.tiny {
        return Err(Failure::Usage("only the tiny configuration is available; pass --tiny".into()));
    }
    let started = std::time::Instant::now();
    let entries = gradsuite::run()?;
    for e in &entries {
        println!("{:<22} max_rel_err={:.3e} checked={} {}", e.name, e.report.max_rel_err, e.report.checked, if e.report.pass { "ok" } else { "FAIL" });
    }
    let worst = gradsuite::max_rel_err(&entries);
    println!("max relative error {worst:.3e} (tolerance {:.0e})", gradsuite::TOLERANCE);
    log::info!("event=grad_check checks={} max_rel_err={worst:.3e} seconds={:.2}", entries.len(), started.elapsed().as_secs_f64());
    Ok(worst < gradsuite::TOLERANCE)
}

fn inspect_cmd(a: &InspectArgs) -> Outcome<()> {
    let path = &a.file;
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let n = f.read(&mut head).context("reading header")?;
        if n < 4 {
            head = [0; 4];
        }
    }
    let pairs: Vec<(String, String)> = if &head == files::MAGIC {
        let h = files::read_header(path)?;
        let mut p = vec![("format".into(), "amct".into())];
        p.extend(h.describe());
        // Velocities are stored in mm/s; 0.01 km/h recovers the generating value.
        let kmh = |v: u32| ((files::mm_s_to_kmh(v) * 100.0).round() / 100.0).to_string();
        p.push(("speed_range_kmh".into(), format!("{}:{}", kmh(h.speed_lo_mm_s), kmh(h.speed_hi_mm_s))));
        p
    } else if &head == amc_nn::checkpoint::MAGIC {
        let (store, meta) = amc_nn::checkpoint::load(path).map_err(|e| anyhow!("{e}"))?;
        let mut p = vec![("format".into(), "checkpoint".into()), ("tensors".into(), store.len().to_string()), ("params".into(), store.total_count().to_string())];
        p.extend(meta);
        p
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let first = text.lines().next().unwrap_or("");
        let Some(rest) = first.strip_prefix("# ") else {
            return Err(anyhow!("{}: not an AMCT file, checkpoint, or annotated CSV", path.display()).into());
        };
        let mut p = vec![("format".into(), "csv".into())];
        p.extend(rest.split(' ').filter_map(|kv| kv.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())));
        p
    };
    for (k, v) in pairs {
        println!("{k}={v}");
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a).map(|_| true),
        Command::Train(a) => train_cmd(cli, a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(cli, a).map(|_| true),
        Command::Simulate(a) => simulate_cmd(cli, a).map(|_| true),
        Command::Experiment(a) => experiment_cmd(cli, a).map(|_| true),
        Command::Report(a) => report_cmd(a).map(|_| true),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Inspect(a) => inspect_cmd(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli);
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `amclab --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            log::error!("event=failed error=\"{e:#}\"");
            ExitCode::from(2)
        }
    }
}

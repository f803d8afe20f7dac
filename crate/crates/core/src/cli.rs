//! The `pullnet` command line: argument parsing, config files, dispatch and
//! exit codes.
//!
//! A config file holds `key = value` lines; every other non-comment line is
//! part of the architecture. Flags override file values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::augmentation::DeformationConfig;
use crate::bench::{bench, synthetic_inputs};
use crate::datasets::{load_dir, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_state, probe_sample, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::network::{NetworkOptions, NetworkState};
use crate::tensor::{Precision, Real, DEFAULT_PITCH_QUANTUM};
use crate::topology::{parse_architecture, NetworkSpec};
use crate::trainer::{evaluate, train_run, ExperimentSummary, TrainConfig};

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    CheckFailed = 1,
    Usage = 2,
    Config = 3,
    Data = 4,
    Geometry = 5,
    Internal = 6,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

impl From<&Error> for ExitCode {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Syntax { .. } | Error::Precision(_) => ExitCode::Config,
            Error::Format(_) | Error::LabelRange { .. } | Error::Io { .. } => ExitCode::Data,
            Error::Geometry { .. } | Error::Dimension(_) => ExitCode::Geometry,
            Error::State(_) => ExitCode::Internal,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pullnet", version, about = "Train and verify convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more networks and report TfbV/bT.
    Train(TrainArgs),
    /// Classification error of a saved model.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Single- versus multi-worker throughput.
    Bench(BenchArgs),
    /// Print layer geometry and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture or config file.
    #[arg(long)]
    pub arch: PathBuf,
    /// Directory holding the dataset files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// mnist, cifar10 or norb.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Runs with seeds seed, seed+1, ...
    #[arg(long)]
    pub runs: Option<usize>,
    /// Keep only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Keep only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// single or double.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub test_every: Option<usize>,
    /// Directory for metrics.log, summary.txt and weight files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `secs=NA` instead of wall time.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub eta_decay: Option<f64>,
    #[arg(long)]
    pub eta_floor: Option<f64>,
    /// Maximum translation in percent of the image size.
    #[arg(long)]
    pub translate: Option<f64>,
    /// Maximum rotation in degrees.
    #[arg(long)]
    pub rotate: Option<f64>,
    /// Maximum scale change in percent.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Maximum horizontal shear in degrees.
    #[arg(long)]
    pub shear: Option<f64>,
    /// Elastic displacement scale in pixels.
    #[arg(long)]
    pub elastic_alpha: Option<f64>,
    #[arg(long)]
    pub elastic_sigma: Option<f64>,
    #[arg(long)]
    pub pitch_quantum: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weight file written by `train --out`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "single")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    /// Only double is accepted.
    #[arg(long, default_value = "double")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Distinct samples cycled through during timing.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Minimum timed duration per measurement, in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub millis: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "single")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub arch: PathBuf,
}

const KEYS: &[&str] = &[
    "dataset",
    "data",
    "epochs",
    "seed",
    "runs",
    "limit",
    "test_limit",
    "workers",
    "precision",
    "test_every",
    "out",
    "timing",
    "shuffle",
    "eta0",
    "eta_decay",
    "eta_floor",
    "translate",
    "rotate",
    "scale",
    "shear",
    "elastic_alpha",
    "elastic_sigma",
    "pitch_quantum",
];

/// Contents of an architecture or config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub architecture: String,
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = ConfigFile::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => {
                    let key = key.trim().replace('-', "_");
                    if !KEYS.contains(&key.as_str()) {
                        return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1)));
                    }
                    if file.values.insert(key.clone(), value.trim().to_string()).is_some() {
                        return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
                    }
                }
                None => {
                    file.architecture.push_str(line);
                    file.architecture.push('\n');
                }
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        parse_architecture(&self.architecture)
    }

    /// `flag` if given, else the file value, parsed.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }
}

/// Fully resolved training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub spec: NetworkSpec,
    pub dataset: DatasetKind,
    pub data: PathBuf,
    pub runs: usize,
    pub limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub precision: Precision,
    pub options: NetworkOptions,
    pub out: Option<PathBuf>,
    pub config: TrainConfig,
}

impl TrainSettings {
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let file = ConfigFile::load(&args.arch)?;
        let spec = file.spec()?;
        let dataset: DatasetKind = file.pick(args.dataset.clone(), "dataset")?.as_deref().unwrap_or("mnist").parse()?;
        let data: PathBuf = file
            .pick(args.data.as_ref().map(|p| p.display().to_string()), "data")?
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("no data directory given (--data)".into()))?;

        let mut config = match dataset {
            DatasetKind::Mnist => TrainConfig::default(),
            DatasetKind::Norb => TrainConfig::norb(),
            DatasetKind::Cifar10 => TrainConfig::cifar10(),
        };
        config.epochs = file.pick(args.epochs, "epochs")?.unwrap_or(config.epochs);
        config.seed = file.pick(args.seed, "seed")?.unwrap_or(config.seed);
        config.test_every = file.pick(args.test_every, "test_every")?.unwrap_or(config.test_every);
        config.eta0 = file.pick(args.eta0, "eta0")?.unwrap_or(config.eta0);
        config.eta_decay = file.pick(args.eta_decay, "eta_decay")?.unwrap_or(config.eta_decay);
        config.eta_floor = file.pick(args.eta_floor, "eta_floor")?.unwrap_or(config.eta_floor.min(config.eta0));
        config.shuffle = !args.no_shuffle && file.pick(None, "shuffle")?.unwrap_or(true);
        config.timing = !args.no_timing && file.pick(None, "timing")?.unwrap_or(true);

        let mut deformation = DeformationConfig::default();
        if let Some(t) = file.pick(args.translate, "translate")? {
            deformation.translate_pct = t;
            deformation.translate = t > 0.0;
        }
        if let Some(r) = file.pick(args.rotate, "rotate")? {
            deformation.rotate_deg = r;
            deformation.rotate = r > 0.0;
        }
        if let Some(s) = file.pick(args.scale, "scale")? {
            deformation.scale_pct = s;
            deformation.scale = s > 0.0;
        }
        if let Some(s) = file.pick(args.shear, "shear")? {
            deformation.shear_deg = s;
            deformation.shear = s > 0.0;
        }
        if let Some(a) = file.pick(args.elastic_alpha, "elastic_alpha")? {
            deformation.elastic_alpha = a;
            deformation.elastic = a > 0.0;
        }
        if let Some(s) = file.pick(args.elastic_sigma, "elastic_sigma")? {
            deformation.elastic_sigma = s;
        }
        config.deformation = deformation;
        config.validate()?;

        let runs = file.pick(args.runs, "runs")?.unwrap_or(1);
        if runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        let precision = file.pick(args.precision.clone(), "precision")?.as_deref().unwrap_or("single").parse()?;
        let options = NetworkOptions {
            workers: file.pick(args.workers, "workers")?.unwrap_or(1),
            pitch_quantum: file.pick(args.pitch_quantum, "pitch_quantum")?.unwrap_or(DEFAULT_PITCH_QUANTUM),
        };
        if options.workers == 0 || options.pitch_quantum == 0 {
            return Err(Error::Config("workers and pitch quantum must be at least 1".into()));
        }
        Ok(TrainSettings {
            spec,
            dataset,
            data,
            runs,
            limit: file.pick(args.limit, "limit")?,
            test_limit: file.pick(args.test_limit, "test_limit")?,
            precision,
            options,
            out: file.pick(args.out.as_ref().map(|p| p.display().to_string()), "out")?.map(PathBuf::from),
            config,
        })
    }
}

/// Writes to the terminal and, when set, a log file.
struct Tee<'a> {
    primary: &'a mut dyn Write,
    file: Option<File>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.primary.write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.primary.flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn out_error(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("cannot write {}: {e}", path.display()))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| out_error(path, e))
}

fn warn(err: &mut dyn Write, spec: &NetworkSpec) {
    for w in spec.warnings() {
        let _ = writeln!(err, "warning: {w}");
    }
}

fn train<T: Real>(s: &TrainSettings, out: &mut dyn Write) -> Result<()> {
    let mut train_set = load_dir(s.dataset, &s.data, Split::Train)?;
    let mut test_set = load_dir(s.dataset, &s.data, Split::Test)?;
    if let Some(n) = s.limit {
        train_set = train_set.limit(n);
    }
    if let Some(n) = s.test_limit {
        test_set = test_set.limit(n);
    }
    let file = match &s.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| out_error(dir, e))?;
            let path = dir.join("metrics.log");
            Some(File::create(&path).map_err(|e| out_error(&path, e))?)
        }
        None => None,
    };
    let mut log = Tee { primary: out, file };
    let mut runs = Vec::with_capacity(s.runs);
    for r in 0..s.runs as u64 {
        let seed = s.config.seed.wrapping_add(r);
        let mut net = NetworkState::<T>::new(s.spec.clone(), seed, s.options)?;
        let run = train_run(&mut net, seed, &train_set, &test_set, &s.config, &mut log)?;
        writeln!(log, "{run}").map_err(|e| Error::Config(format!("cannot write metrics: {e}")))?;
        if let Some(dir) = &s.out {
            write_out(&dir.join(format!("weights-seed{seed}.txt")), &net.to_weights_text())?;
        }
        runs.push(run);
    }
    let summary = ExperimentSummary::from_runs(runs)?;
    writeln!(log, "{summary}").map_err(|e| Error::Config(format!("cannot write metrics: {e}")))?;
    if let Some(dir) = &s.out {
        write_out(&dir.join("summary.txt"), &format!("{summary}\n"))?;
    }
    Ok(())
}

fn eval<T: Real>(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(&args.model)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.model.display())))?;
    let options = NetworkOptions {
        workers: args.workers,
        ..NetworkOptions::default()
    };
    let mut net = NetworkState::<T>::from_weights_text(&text, options)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let mut data = load_dir(args.dataset.parse()?, &args.data, split)?;
    if let Some(n) = args.limit {
        data = data.limit(n);
    }
    let err = evaluate(&mut net, &data)?;
    let _ = writeln!(out, "eval split={split} samples={} error={err:.4}", data.len());
    Ok(())
}

fn run_bench<T: Real>(args: &BenchArgs, spec: &NetworkSpec, out: &mut dyn Write) -> Result<()> {
    let inputs = synthetic_inputs::<T>(spec, args.samples, args.seed)?;
    let report = bench(spec, &inputs, args.workers, args.seed, Duration::from_millis(args.millis))?;
    let _ = writeln!(out, "{report}");
    Ok(())
}

fn inspect(spec: &NetworkSpec, out: &mut dyn Write) {
    let _ = writeln!(out, "{spec}");
    for (i, (layer, g)) in spec.layers().iter().zip(spec.geometries()).enumerate() {
        let _ = writeln!(out, "layer={i} kind={} maps={} size={}x{}", layer.kind(), g.maps, g.width, g.height);
    }
    for w in spec.warnings() {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(out, "parameters={}", spec.parameter_count());
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let settings = TrainSettings::resolve(&args)?;
            warn(err, &settings.spec);
            match settings.precision {
                Precision::Single => train::<f32>(&settings, out)?,
                Precision::Double => train::<f64>(&settings, out)?,
            }
        }
        Command::Eval(args) => match args.precision.parse()? {
            Precision::Single => eval::<f32>(&args, out)?,
            Precision::Double => eval::<f64>(&args, out)?,
        },
        Command::Gradcheck(args) => {
            if args.precision.parse::<Precision>()? != Precision::Double {
                return Err(Error::Precision("gradcheck runs in double precision only".into()));
            }
            let spec = ConfigFile::load(&args.arch)?.spec()?;
            warn(err, &spec);
            let mut net = NetworkState::<f64>::new(spec.clone(), args.seed, NetworkOptions::default())?;
            let (maps, label) = probe_sample::<f64>(&spec, args.seed)?;
            let report = check_state(&mut net, &maps, label, args.step, args.tol)?;
            let _ = writeln!(out, "{report}");
            if !report.passed() {
                return Ok(ExitCode::CheckFailed);
            }
        }
        Command::Bench(args) => {
            let spec = ConfigFile::load(&args.arch)?.spec()?;
            warn(err, &spec);
            match args.precision.parse()? {
                Precision::Single => run_bench::<f32>(&args, &spec, out)?,
                Precision::Double => run_bench::<f64>(&args, &spec, out)?,
            }
        }
        Command::Inspect(args) => inspect(&ConfigFile::load(&args.arch)?.spec()?, out),
    }
    Ok(ExitCode::Ok)
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                ExitCode::Usage
            } else {
                let _ = write!(out, "{text}");
                ExitCode::Ok
            };
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(&e)
        }
    }
}

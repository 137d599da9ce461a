//! Command-line front end: `synth`, `experiment`, `train` and `eval`.
//!
//! Exit codes: 0 on success, 1 on a runtime or domain error, 2 on a usage
//! error. Every file a command writes lives under its output directory.

mod config;

pub use config::RunConfig;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{
    drift_report, emit_table, make_cohort, run_protocol, write_report_dir, CohortSpec, DatasetDescriptor,
    ExperimentError, ModelKind, Protocol, TableFormat,
};
use crate::gaze_io::{
    default_file_name, load_dataset, write_recording_csv, DatasetFilter, GazeIoError, LoadOptions, ParseOptions,
    Recording, Source, TaskKind, TaskSelection,
};
use crate::gbt::{train_gbt, FeatureMatrix, GbtConfig, GbtEnsemble, GbtError};
use crate::model::{DenseNetConfig, DenseNetModel, ModelError, TransformerConfig, TransformerModel};
use crate::preprocess::{build_raw_windowset, Normalizer, PreprocessError, WindowSet};
use crate::seed::derive_seed;
use crate::training::{
    evaluate, evaluate_with, fingerprint, train_epochs, Evaluation, LabelEncoder, TrainReport, TrainingError,
};

/// Name of the cohort description `synth` writes next to the CSVs.
pub const COHORT_FILE: &str = "cohort.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error(transparent)]
    GazeIo(#[from] GazeIoError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gbt(#[from] GbtError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Module the error originates from, for diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::GazeIo(_) => "gaze_io",
            CliError::Preprocess(_) => "preprocess",
            CliError::Training(_) => "training",
            CliError::Model(_) => "model",
            CliError::Gbt(_) => "gbt",
            CliError::Experiment(_) => "experiments",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gazeauth", version, about = "Gaze-based user identification: synthesis, training and drift experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic longitudinal cohort as CSV recordings.
    Synth(SynthArgs),
    /// Run experiment protocols and write report tables.
    Experiment(ExperimentArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub users: Option<u32>,
    /// Comma-separated task codes, or ALL.
    #[arg(long, value_parser = parse_task_list)]
    pub tasks: Option<TaskList>,
    #[arg(long, value_parser = parse_non_negative)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seconds per recording.
    #[arg(long, value_parser = parse_positive)]
    pub duration: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Short,
    Long,
    Retrained,
    All,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::Short => vec![Protocol::ShortTerm],
            ProtocolArg::Long => vec![Protocol::LongTerm],
            ProtocolArg::Retrained => vec![Protocol::Retrained],
            ProtocolArg::All => Protocol::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Transformer,
    Densenet,
    Gbt,
    All,
}

impl ModelArg {
    fn models(self) -> Vec<ModelKind> {
        match self {
            ModelArg::Transformer => vec![ModelKind::Transformer],
            ModelArg::Densenet => vec![ModelKind::DenseNet],
            ModelArg::Gbt => vec![ModelKind::Gbt],
            ModelArg::All => ModelKind::ALL.to_vec(),
        }
    }
}

/// Tunables shared by the commands that build windows and train models.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per window.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub window_len: Option<u32>,
    /// Training epochs of the neural models.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Boosting rounds of the tree ensemble.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub gbt_rounds: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// One task code (VRG, PUR, VID, TEX, RAN), or `all` for every table row.
    #[arg(long, value_parser = parse_task_row)]
    pub task: Option<TaskRows>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: ModelKindArg,
    /// Task code, or `all` for the union of tasks.
    #[arg(long, default_value = "all", value_parser = parse_task_selection)]
    pub task: TaskSelection,
    /// Comma-separated recording rounds to train on.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub rounds: Vec<u8>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated recording rounds to evaluate on.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub rounds: Vec<u8>,
    /// Window length override; must match the checkpoint.
    #[arg(long)]
    pub window_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindArg {
    Transformer,
    Densenet,
    Gbt,
}

impl From<ModelKindArg> for ModelKind {
    fn from(m: ModelKindArg) -> Self {
        match m {
            ModelKindArg::Transformer => ModelKind::Transformer,
            ModelKindArg::Densenet => ModelKind::DenseNet,
            ModelKindArg::Gbt => ModelKind::Gbt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskList(pub Vec<TaskKind>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRows(pub Vec<TaskSelection>);

fn parse_task_list(s: &str) -> Result<TaskList, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TaskList(TaskKind::ALL.to_vec()));
    }
    s.split(',')
        .map(|code| TaskKind::from_code(code.trim()).ok_or_else(|| format!("unknown task `{code}`")))
        .collect::<Result<Vec<_>, _>>()
        .map(TaskList)
}

fn parse_task_selection(s: &str) -> Result<TaskSelection, String> {
    s.parse().map_err(|e: GazeIoError| e.to_string())
}

fn parse_task_row(s: &str) -> Result<TaskRows, String> {
    match parse_task_selection(s)? {
        TaskSelection::All => Ok(TaskRows(TaskSelection::table_rows().to_vec())),
        one => Ok(TaskRows(vec![one])),
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a non-negative number")),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    fs::write(path, contents).map_err(io_error(path))
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config file)")))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

/// Applies synth flags over the configured cohort.
pub fn resolve_synth(args: &SynthArgs) -> Result<(CohortSpec, PathBuf), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    let mut spec = config.cohort;
    if let Some(users) = args.users {
        spec.n_users = users as usize;
    }
    if let Some(TaskList(tasks)) = &args.tasks {
        spec.tasks = tasks.clone();
    }
    if let Some(drift) = args.drift {
        spec.drift_magnitude = drift;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(duration) = args.duration {
        spec.duration_s = duration;
    }
    if let Some(rate) = args.rate {
        spec.sample_rate_hz = rate;
    }
    Ok((spec, require(args.out.clone().or(config.out), "out")?))
}

pub fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let (spec, out) = resolve_synth(&args)?;
    let cohort = make_cohort(&spec)?;
    fs::create_dir_all(&out).map_err(io_error(&out))?;
    for rec in &cohort.recordings {
        let path = out.join(default_file_name(&rec.meta));
        let mut buffer = Vec::new();
        write_recording_csv(rec, &mut buffer)?;
        fs::write(&path, buffer).map_err(io_error(&path))?;
    }
    let description = serde_json::to_string_pretty(&cohort.spec).expect("cohort spec serializes");
    write_file(&out.join(COHORT_FILE), &description)?;
    println!("wrote {} recordings of {} users to {}", cohort.recordings.len(), spec.n_users, out.display());
    Ok(())
}

/// Loads every recording under `root`. A `cohort.json` marks the directory
/// as synthetic and supplies its sample rate.
pub fn load_recordings(root: &Path, rounds: Option<&[u8]>) -> Result<(Vec<Recording>, DatasetDescriptor), CliError> {
    let cohort_path = root.join(COHORT_FILE);
    let cohort: Option<CohortSpec> = if cohort_path.is_file() {
        let text = fs::read_to_string(&cohort_path).map_err(io_error(&cohort_path))?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", cohort_path.display())))?)
    } else {
        None
    };
    let options = LoadOptions {
        parse: ParseOptions {
            nominal_rate_hz: cohort.as_ref().map_or(ParseOptions::default().nominal_rate_hz, |c| c.sample_rate_hz),
            ..Default::default()
        },
        source: if cohort.is_some() { Source::Synthetic } else { Source::Real },
        ..Default::default()
    };
    let filter = DatasetFilter {
        rounds: rounds.map(|r| r.iter().copied().collect::<BTreeSet<u8>>()),
        ..Default::default()
    };
    let dataset = load_dataset(root, &filter, &options)?;
    for (path, err) in &dataset.failures {
        eprintln!("warning: skipped {}: {err}", path.display());
    }
    let descriptor = match cohort {
        Some(spec) => DatasetDescriptor::Synthetic(spec),
        None => DatasetDescriptor::Real {
            root: root.display().to_string(),
        },
    };
    Ok((dataset.recordings, descriptor))
}

fn apply_common(config: &mut RunConfig, common: &CommonArgs) {
    if let Some(data) = &common.data {
        config.data = Some(data.clone());
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(len) = common.window_len {
        config.window.window_len = len as usize;
    }
    if let Some(epochs) = common.epochs {
        config.train.epochs = epochs;
    }
    if let Some(rounds) = common.gbt_rounds {
        config.gbt.n_rounds = rounds as usize;
    }
}

/// Applies experiment flags over the configuration file and defaults.
pub fn resolve_experiment(args: &ExperimentArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut config, &args.common);
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    if let Some(p) = args.protocol {
        config.protocols = p.protocols();
    }
    if let Some(m) = args.model {
        config.models = m.models();
    }
    if let Some(TaskRows(rows)) = &args.task {
        config.tasks = rows.clone();
    }
    Ok(config)
}

pub fn cmd_experiment(args: ExperimentArgs) -> Result<(), CliError> {
    let config = resolve_experiment(&args)?;
    let data = require(config.data.clone(), "data")?;
    let out = require(config.out.clone(), "out")?;
    let (recordings, descriptor) = load_recordings(&data, None)?;
    let mut experiment = config.experiment_config();
    if experiment.tasks.len() > 1 {
        // Rows for tasks the dataset never recorded stay empty in the tables.
        experiment.tasks.retain(|t| recordings.iter().any(|r| t.matches(r.meta.task)));
    }
    let mut protocols = config.protocols.clone();
    protocols.sort();
    protocols.dedup();
    let mut runs = Vec::with_capacity(protocols.len());
    for protocol in protocols {
        let run = run_protocol(&recordings, &descriptor, protocol, &experiment)?;
        println!("{}", emit_table(&run.report, TableFormat::Markdown));
        runs.push(run);
    }
    if let [short, long, retrained] = runs.as_slice() {
        let summary = drift_report(&short.report, &long.report, &retrained.report)?;
        for e in summary.failures() {
            println!("recovery below threshold: {} / {}", e.task, e.model);
        }
    }
    write_report_dir(&out, &runs)?;
    println!("reports written to {}", out.display());
    Ok(())
}

/// What `train` records about a checkpoint so that `eval` can rebuild windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelKind,
    pub task: TaskSelection,
    pub rounds: Vec<u8>,
    pub window: crate::preprocess::WindowConfig,
}

const MANIFEST_FILE: &str = "manifest.json";
const MODEL_FILE: &str = "model.json";
const NORMALIZER_FILE: &str = "normalizer.json";
const LABELS_FILE: &str = "labels.json";
const REPORT_FILE: &str = "train_report.json";

fn task_windows(recordings: &[Recording], task: TaskSelection, config: &crate::preprocess::WindowConfig) -> Result<WindowSet, CliError> {
    let selected: Vec<Recording> = recordings.iter().filter(|r| task.matches(r.meta.task)).cloned().collect();
    Ok(build_raw_windowset(&selected, config)?)
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut config, &args.common);
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    let data = require(config.data.clone(), "data")?;
    let out = require(config.out.clone(), "out")?;
    let model = ModelKind::from(args.model);
    let (recordings, _) = load_recordings(&data, Some(&args.rounds))?;
    let mut train = task_windows(&recordings, args.task, &config.window)?;
    let normalizer = Normalizer::fit_windows(&train, config.normalization)?;
    normalizer.apply(&mut train)?;
    let encoder = LabelEncoder::fit(train.labels());
    let n_classes = encoder.n_classes();
    let seed = derive_seed(config.seed, &[0x7a11]);
    let train_config = crate::training::TrainConfig {
        shuffle_seed: derive_seed(seed, &[config.train.shuffle_seed]),
        ..config.train
    };
    let (checkpoint, report) = match model {
        ModelKind::Transformer => {
            let cfg = TransformerConfig {
                n_classes,
                seq_len: train.window_len(),
                input_channels: train.channels(),
                ..config.transformer
            };
            let mut net = TransformerModel::new(cfg, seed)?;
            let report = train_epochs(&mut net, &train, &encoder, &train_config)?;
            (net.to_text(), report)
        }
        ModelKind::DenseNet => {
            let cfg = DenseNetConfig {
                n_classes,
                input_channels: train.channels(),
                ..config.densenet.clone()
            };
            let mut net = DenseNetModel::new(cfg, seed)?;
            let report = train_epochs(&mut net, &train, &encoder, &train_config)?;
            (net.to_text(), report)
        }
        ModelKind::Gbt => {
            let started = Instant::now();
            let cfg = GbtConfig {
                n_classes,
                ..config.gbt
            };
            let labels = encoder.encode_all(train.labels())?;
            let features = FeatureMatrix::from_windows(&train);
            let ensemble = train_gbt(&features, &labels, &cfg)?;
            let mut correct = 0;
            for (i, &label) in labels.iter().enumerate() {
                correct += usize::from(ensemble.predict(features.row(i))?.class == label);
            }
            let text = ensemble.to_text();
            let report = TrainReport {
                epoch_losses: ensemble.train_log_loss.clone(),
                final_train_accuracy: correct as f64 / labels.len() as f64,
                wall_clock_s: started.elapsed().as_secs_f64(),
                fingerprint: fingerprint(&[
                    "gbt".to_string(),
                    serde_json::to_string(&cfg).expect("config serializes"),
                    serde_json::to_string(&encoder).expect("encoder serializes"),
                    train.len().to_string(),
                ]),
            };
            (text, report)
        }
    };
    let manifest = CheckpointManifest {
        model,
        task: args.task,
        rounds: args.rounds.clone(),
        window: config.window,
    };
    write_file(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write_file(&out.join(MODEL_FILE), &checkpoint)?;
    write_file(&out.join(NORMALIZER_FILE), &normalizer.to_text())?;
    write_file(&out.join(LABELS_FILE), &serde_json::to_string(&encoder).expect("encoder serializes"))?;
    write_file(&out.join(REPORT_FILE), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!(
        "trained {model} on {} windows of {n_classes} subjects: train accuracy {:.4}",
        train.len(),
        report.final_train_accuracy
    );
    Ok(())
}

fn read_checkpoint_file(dir: &Path, name: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(io_error(&path))
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let dir = &args.checkpoint;
    let manifest: CheckpointManifest = serde_json::from_str(&read_checkpoint_file(dir, MANIFEST_FILE)?)
        .map_err(|e| CliError::Checkpoint(format!("{MANIFEST_FILE}: {e}")))?;
    let normalizer = Normalizer::from_text(&read_checkpoint_file(dir, NORMALIZER_FILE)?)?;
    let encoder: LabelEncoder = serde_json::from_str(&read_checkpoint_file(dir, LABELS_FILE)?)
        .map_err(|e| CliError::Checkpoint(format!("{LABELS_FILE}: {e}")))?;
    let mut window = manifest.window;
    if let Some(len) = args.window_len {
        if len != manifest.window.window_len {
            return Err(CliError::Checkpoint(format!(
                "checkpoint expects windows of {} samples, got {len}",
                manifest.window.window_len
            )));
        }
        window.window_len = len;
    }
    let (recordings, _) = load_recordings(&args.data, Some(&args.rounds))?;
    let mut test = task_windows(&recordings, manifest.task, &window)?;
    normalizer.apply(&mut test)?;
    let model_text = read_checkpoint_file(dir, MODEL_FILE)?;
    let eval: Evaluation = match manifest.model {
        ModelKind::Transformer => evaluate(&TransformerModel::from_text(&model_text)?, &test, &encoder)?,
        ModelKind::DenseNet => evaluate(&DenseNetModel::from_text(&model_text)?, &test, &encoder)?,
        ModelKind::Gbt => {
            let ensemble = GbtEnsemble::from_text(&model_text)?;
            let features = FeatureMatrix::from_windows(&test);
            if features.n_cols() != ensemble.feature_count {
                return Err(CliError::Checkpoint(format!(
                    "windows give {} features, checkpoint expects {}",
                    features.n_cols(),
                    ensemble.feature_count
                )));
            }
            evaluate_with(&test, &encoder, |i| {
                ensemble
                    .predict(features.row(i))
                    .map(|p| p.class)
                    .map_err(|e| TrainingError::InvalidConfig(e.to_string()))
            })?
        }
    };
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "accuracy: {:.4} ({}/{})", eval.accuracy, eval.correct, eval.total);
    for (task, (correct, total)) in &eval.per_task {
        let _ = writeln!(stdout, "{task}: {:.4} ({correct}/{total})", *correct as f64 / *total as f64);
    }
    Ok(())
}

//! Short-term, long-term and retrained experiment protocols over every task
//! and classifier, with table-shaped reports.

mod cohort;
mod report;

pub use cohort::{
    cohort_user_params, make_cohort, make_longitudinal_cohort, subject_id, Cohort, CohortSpec, CohortUser, ParamRange,
    UserParamRanges, COHORT_ROUNDS, COHORT_SESSIONS,
};
pub use report::{
    drift_report, emit_reports_csv, emit_table, parse_table_csv, write_report_dir, DriftEntry, DriftSummary, TableFormat,
    REFERENCE_ALL_ROW, RECOVERY_THRESHOLD,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze_io::{GazeIoError, Recording, TaskSelection};
use crate::gbt::{train_gbt, FeatureMatrix, GbtConfig, GbtError};
use crate::model::{DenseNetConfig, DenseNetModel, ModelError, TransformerConfig, TransformerModel};
use crate::preprocess::{build_raw_windowset, NormalizationScope, Normalizer, PreprocessError, WindowConfig, WindowSet};
use crate::seed::derive_seed;
use crate::training::{
    evaluate, evaluate_with, fingerprint, split, train_epochs, LabelEncoder, SplitSpec, TrainConfig, TrainingError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("the {protocol} protocol needs round {round}, which the dataset does not contain")]
    MissingRound { protocol: Protocol, round: u8 },
    #[error("no usable windows for {0}")]
    EmptyWindowSet(String),
    #[error("reports do not describe the same experiment: {0}")]
    MismatchedReports(String),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed report table: {0}")]
    Table(String),
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
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train and test on round 1, split by [`SplitSpec`].
    ShortTerm,
    /// Train on round 1, test on round 3.
    LongTerm,
    /// Train on round 1 plus part of round 3, test on the rest of round 3.
    Retrained,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::ShortTerm, Protocol::LongTerm, Protocol::Retrained];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::ShortTerm => "short_term",
            Protocol::LongTerm => "long_term",
            Protocol::Retrained => "retrained",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Protocol::ShortTerm => "Model Accuracy Comparison-Short-term Training",
            Protocol::LongTerm => "Model Accuracy Comparison-Long-term Testing",
            Protocol::Retrained => "Model Accuracy Comparison-Long-term Training with Updated Data",
        }
    }

    pub fn train_round_label(self) -> &'static str {
        match self {
            Protocol::ShortTerm | Protocol::LongTerm => "Round1",
            Protocol::Retrained => "Round1+3",
        }
    }

    pub fn test_round_label(self) -> &'static str {
        match self {
            Protocol::ShortTerm => "Round1",
            Protocol::LongTerm | Protocol::Retrained => "Round3",
        }
    }

    fn required_rounds(self) -> &'static [u8] {
        match self {
            Protocol::ShortTerm => &[1],
            Protocol::LongTerm | Protocol::Retrained => &[1, 3],
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifier backends in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DenseNet,
    Transformer,
    Gbt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::DenseNet, ModelKind::Transformer, ModelKind::Gbt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DenseNet => "densenet",
            ModelKind::Transformer => "transformer",
            ModelKind::Gbt => "gbt",
        }
    }

    /// Column header in emitted tables.
    pub fn column(self) -> &'static str {
        match self {
            ModelKind::DenseNet => "DenseNet",
            ModelKind::Transformer => "Transformer",
            ModelKind::Gbt => "XG Boost",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the recordings came from; part of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDescriptor {
    Real { root: String },
    Synthetic(CohortSpec),
}

/// Settings shared by every cell of a protocol run.
///
/// `n_classes`, `seq_len` and `input_channels` in the model configurations
/// are overwritten per cell from the training data. The seeds in `split`
/// and `train` are mixed with the master seed and the cell coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub models: Vec<ModelKind>,
    pub tasks: Vec<TaskSelection>,
    pub window: WindowConfig,
    pub normalization: NormalizationScope,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub transformer: TransformerConfig,
    pub densenet: DenseNetConfig,
    pub gbt: GbtConfig,
    /// Round-3 session held out by the retrained protocol; the other session is trained on.
    pub retrained_test_session: u8,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: ModelKind::ALL.to_vec(),
            tasks: TaskSelection::table_rows().to_vec(),
            window: WindowConfig::default(),
            normalization: NormalizationScope::PerChannel,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            transformer: TransformerConfig::default(),
            densenet: DenseNetConfig::default(),
            gbt: GbtConfig::default(),
            retrained_test_session: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.models.is_empty() || self.tasks.is_empty() {
            return Err(ExperimentError::InvalidConfig("select at least one model and one task".into()));
        }
        if !(1..=2).contains(&self.retrained_test_session) {
            return Err(ExperimentError::InvalidConfig(format!(
                "retrained test session {} not in 1..=2",
                self.retrained_test_session
            )));
        }
        self.window.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Canonical JSON, hashed into report fingerprints.
    pub fn document(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Accuracies of one table row; absent models have no entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskSelection,
    pub cells: BTreeMap<ModelKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    pub models: Vec<ModelKind>,
    /// Rows in the order the tasks were requested.
    pub rows: Vec<ReportRow>,
    /// Hash of the configuration, dataset descriptor and every cell's training inputs.
    pub fingerprint: String,
    /// Hash of the normalizer, label encoding and training windows per task.
    pub training_inputs: BTreeMap<TaskSelection, String>,
}

impl ExperimentReport {
    pub fn accuracy(&self, task: TaskSelection, model: ModelKind) -> Option<f64> {
        self.rows.iter().find(|r| r.task == task)?.cells.get(&model).copied()
    }
}

/// A trained cell's serialized artifacts, for the checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CellArtifacts {
    pub task: TaskSelection,
    /// `None` for the per-task preprocessing files.
    pub model: Option<ModelKind>,
    pub file_name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub report: ExperimentReport,
    pub artifacts: Vec<CellArtifacts>,
}

/// Raw training and test windows of one protocol for one task.
#[derive(Debug, Clone)]
pub struct ProtocolWindows {
    pub train: WindowSet,
    pub test: WindowSet,
}

fn task_index(task: TaskSelection) -> u64 {
    TaskSelection::table_rows().iter().position(|t| *t == task).unwrap_or(0) as u64
}

/// Unnormalized train/test windows for `protocol` restricted to `task`.
pub fn protocol_windows(
    recordings: &[Recording],
    protocol: Protocol,
    task: TaskSelection,
    config: &ExperimentConfig,
) -> Result<ProtocolWindows, ExperimentError> {
    let rounds: BTreeSet<u8> = recordings.iter().map(|r| r.meta.round).collect();
    for &round in protocol.required_rounds() {
        if !rounds.contains(&round) {
            return Err(ExperimentError::MissingRound { protocol, round });
        }
    }
    let selected: Vec<Recording> = recordings
        .iter()
        .filter(|r| task.matches(r.meta.task) && protocol.required_rounds().contains(&r.meta.round))
        .cloned()
        .collect();
    let context = || format!("{protocol} / {task}");
    let all = build_raw_windowset(&selected, &config.window).map_err(|e| match e {
        PreprocessError::EmptyWindowSet => ExperimentError::EmptyWindowSet(context()),
        other => other.into(),
    })?;
    let held_out = config.retrained_test_session;
    let (train, test) = match protocol {
        Protocol::ShortTerm => {
            let spec = SplitSpec {
                seed: derive_seed(config.seed, &[protocol.index(), task_index(task), config.split.seed]),
                ..config.split
            };
            split(&all, &spec)?
        }
        Protocol::LongTerm => (all.filter(|p| p.round == 1), all.filter(|p| p.round == 3)),
        Protocol::Retrained => (
            all.filter(|p| p.round == 1 || (p.round == 3 && p.session != held_out)),
            all.filter(|p| p.round == 3 && p.session == held_out),
        ),
    };
    if train.is_empty() || test.is_empty() {
        return Err(ExperimentError::EmptyWindowSet(context()));
    }
    Ok(ProtocolWindows { train, test })
}

fn window_data_hash(set: &WindowSet) -> String {
    let bytes: Vec<u8> = set.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut docs = vec![hex_of(&bytes)];
    docs.extend(set.labels().iter().cloned());
    docs.extend(set.provenance().iter().map(|p| format!("{}:{}:{}", p.round, p.session, p.task)));
    fingerprint(&docs)
}

fn hex_of(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Trains and evaluates one model on prepared, normalized windows.
/// Returns the test accuracy and the serialized model.
pub fn run_cell(
    model: ModelKind,
    train: &WindowSet,
    test: &WindowSet,
    encoder: &LabelEncoder,
    config: &ExperimentConfig,
    cell_seed: u64,
) -> Result<(f64, String), ExperimentError> {
    let n_classes = encoder.n_classes();
    let channels = train.channels();
    let train_config = TrainConfig {
        shuffle_seed: derive_seed(cell_seed, &[config.train.shuffle_seed]),
        ..config.train
    };
    match model {
        ModelKind::Transformer => {
            let cfg = TransformerConfig {
                n_classes,
                seq_len: train.window_len(),
                input_channels: channels,
                ..config.transformer
            };
            let mut net = TransformerModel::new(cfg, cell_seed)?;
            train_epochs(&mut net, train, encoder, &train_config)?;
            Ok((evaluate(&net, test, encoder)?.accuracy, net.to_text()))
        }
        ModelKind::DenseNet => {
            let cfg = DenseNetConfig {
                n_classes,
                input_channels: channels,
                ..config.densenet.clone()
            };
            let mut net = DenseNetModel::new(cfg, cell_seed)?;
            train_epochs(&mut net, train, encoder, &train_config)?;
            Ok((evaluate(&net, test, encoder)?.accuracy, net.to_text()))
        }
        ModelKind::Gbt => {
            let cfg = GbtConfig {
                n_classes,
                ..config.gbt
            };
            let labels = encoder.encode_all(train.labels())?;
            let ensemble = train_gbt(&FeatureMatrix::from_windows(train), &labels, &cfg)?;
            let features = FeatureMatrix::from_windows(test);
            let eval = evaluate_with(test, encoder, |i| {
                ensemble
                    .predict(features.row(i))
                    .map(|p| p.class)
                    .map_err(|e| TrainingError::InvalidConfig(e.to_string()))
            })?;
            Ok((eval.accuracy, ensemble.to_text()))
        }
    }
}

/// Runs every selected (task, model) cell of `protocol`.
///
/// Per task: the normalizer is fitted on the protocol's training windows
/// only, the label encoding comes from the training subjects only, and each
/// model is trained with a seed derived from the master seed and the cell
/// coordinates. Cells run sequentially; results do not depend on order.
pub fn run_protocol(
    recordings: &[Recording],
    dataset: &DatasetDescriptor,
    protocol: Protocol,
    config: &ExperimentConfig,
) -> Result<ProtocolRun, ExperimentError> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.tasks.len());
    let mut training_inputs = BTreeMap::new();
    let mut artifacts = Vec::new();
    let mut models = config.models.clone();
    models.sort();
    models.dedup();
    for &task in &config.tasks {
        let ProtocolWindows { mut train, mut test } = protocol_windows(recordings, protocol, task, config)?;
        let normalizer = Normalizer::fit_windows(&train, config.normalization)?;
        normalizer.apply(&mut train)?;
        normalizer.apply(&mut test)?;
        let encoder = LabelEncoder::fit(train.labels());
        let encoder_doc = serde_json::to_string(&encoder).expect("encoder serializes");
        training_inputs.insert(
            task,
            fingerprint(&[normalizer.to_text(), encoder_doc.clone(), window_data_hash(&train)]),
        );
        artifacts.push(CellArtifacts {
            task,
            model: None,
            file_name: "normalizer.json".into(),
            contents: normalizer.to_text(),
        });
        artifacts.push(CellArtifacts {
            task,
            model: None,
            file_name: "labels.json".into(),
            contents: encoder_doc,
        });
        let mut cells = BTreeMap::new();
        for &model in &models {
            let cell_seed = derive_seed(config.seed, &[protocol.index(), task_index(task), model.index()]);
            let (accuracy, checkpoint) = run_cell(model, &train, &test, &encoder, config, cell_seed)?;
            cells.insert(model, accuracy);
            artifacts.push(CellArtifacts {
                task,
                model: Some(model),
                file_name: format!("{}.json", model.name()),
                contents: checkpoint,
            });
        }
        rows.push(ReportRow { task, cells });
    }
    let mut docs = vec![
        protocol.name().to_string(),
        config.document(),
        serde_json::to_string(dataset).expect("descriptor serializes"),
    ];
    docs.extend(training_inputs.iter().map(|(t, h)| format!("{t}={h}")));
    Ok(ProtocolRun {
        report: ExperimentReport {
            protocol,
            seed: config.seed,
            dataset: dataset.clone(),
            models,
            rows,
            fingerprint: fingerprint(&docs),
            training_inputs,
        },
        artifacts,
    })
}

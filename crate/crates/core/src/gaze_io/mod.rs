//! Recordings of binocular gaze direction: the data model, a CSV reader and
//! writer for the headset export format, filename-encoded metadata, dataset
//! loading and a synthetic fixation–saccade generator.

mod csv_format;
mod dataset;
mod path_meta;
mod synth;

pub use csv_format::{parse_recording_csv, write_recording_csv, ParseOptions, REQUIRED_COLUMNS};
pub use dataset::{load_dataset, Dataset, DatasetFilter, LoadOptions};
pub use path_meta::{default_file_name, parse_path_meta, MetaPattern, DEFAULT_META_PATTERN};
pub use synth::{apply_behavioral_drift, generate_synthetic_recording, SyntheticUserParams};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 250.0;

/// Gaze-vector norm band a valid eye sample must fall into.
pub const NORM_BAND: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Error)]
pub enum GazeIoError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("recording has no data rows")]
    EmptyRecording,
    #[error("timestamps decrease at data row {row}")]
    NonMonotonicTime { row: usize },
    #[error("filename `{0}` does not match the metadata pattern")]
    PatternMismatch(String),
    #[error("unknown task code `{0}`")]
    UnknownTask(String),
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error("invalid metadata pattern: {0}")]
    InvalidPattern(String),
    #[error("no recordings matched under {0}")]
    EmptyDataset(PathBuf),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The five stimulus paradigms of the headset recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "VRG")]
    Vergence,
    #[serde(rename = "PUR")]
    SmoothPursuit,
    #[serde(rename = "VID")]
    Video,
    #[serde(rename = "TEX")]
    Reading,
    #[serde(rename = "RAN")]
    RandomSaccade,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Vergence,
        TaskKind::SmoothPursuit,
        TaskKind::Video,
        TaskKind::Reading,
        TaskKind::RandomSaccade,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TaskKind::Vergence => "VRG",
            TaskKind::SmoothPursuit => "PUR",
            TaskKind::Video => "VID",
            TaskKind::Reading => "TEX",
            TaskKind::RandomSaccade => "RAN",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code().eq_ignore_ascii_case(code))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Experiment-level task filter: one concrete task or the union of all five.
///
/// `All` only exists at this level; a [`Recording`] always carries a concrete [`TaskKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskSelection {
    All,
    Task(TaskKind),
}

impl TaskSelection {
    /// Table row order: All, then tasks alphabetically by code.
    pub fn table_rows() -> [TaskSelection; 6] {
        [
            TaskSelection::All,
            TaskSelection::Task(TaskKind::SmoothPursuit),
            TaskSelection::Task(TaskKind::RandomSaccade),
            TaskSelection::Task(TaskKind::Reading),
            TaskSelection::Task(TaskKind::Video),
            TaskSelection::Task(TaskKind::Vergence),
        ]
    }

    pub fn matches(self, task: TaskKind) -> bool {
        match self {
            TaskSelection::All => true,
            TaskSelection::Task(t) => t == task,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskSelection::All => "All",
            TaskSelection::Task(t) => t.code(),
        }
    }
}

impl FromStr for TaskSelection {
    type Err = GazeIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TaskSelection::All);
        }
        TaskKind::from_code(s)
            .map(TaskSelection::Task)
            .ok_or_else(|| GazeIoError::UnknownTask(s.to_string()))
    }
}

impl TryFrom<String> for TaskSelection {
    type Error = GazeIoError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TaskSelection> for String {
    fn from(t: TaskSelection) -> Self {
        t.label().to_string()
    }
}

impl fmt::Display for TaskSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One binocular observation. Coordinates are ordered clx, cly, clz, crx, cry, crz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t_ms: f64,
    pub coords: [f64; 6],
    pub valid: bool,
}

impl GazeSample {
    /// Builds a sample, marking it invalid when any coordinate is non-finite
    /// or either eye's direction norm leaves [`NORM_BAND`].
    pub fn new(t_ms: f64, coords: [f64; 6]) -> Self {
        let valid = coords_plausible(&coords);
        Self { t_ms, coords, valid }
    }

    pub fn left(&self) -> [f64; 3] {
        [self.coords[0], self.coords[1], self.coords[2]]
    }

    pub fn right(&self) -> [f64; 3] {
        [self.coords[3], self.coords[4], self.coords[5]]
    }
}

pub(crate) fn coords_plausible(coords: &[f64; 6]) -> bool {
    if !coords.iter().all(|c| c.is_finite()) {
        return false;
    }
    coords.chunks(3).all(|eye| {
        let norm = eye.iter().map(|v| v * v).sum::<f64>().sqrt();
        (NORM_BAND.0..=NORM_BAND.1).contains(&norm)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub subject_id: String,
    pub round: u8,
    pub session: u8,
    pub task: TaskKind,
    pub source: Source,
}

impl RecordingMeta {
    pub fn new(
        subject_id: impl Into<String>,
        round: u8,
        session: u8,
        task: TaskKind,
        source: Source,
    ) -> Result<Self, GazeIoError> {
        if !(1..=3).contains(&round) {
            return Err(GazeIoError::InvalidMeta(format!("round {round} not in 1..=3")));
        }
        if !(1..=2).contains(&session) {
            return Err(GazeIoError::InvalidMeta(format!("session {session} not in 1..=2")));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            round,
            session,
            task,
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    pub samples: Vec<GazeSample>,
    pub nominal_rate_hz: f64,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.valid).count() as f64 / self.samples.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_codes_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::from_code(t.code()), Some(t));
        }
        assert_eq!(TaskKind::from_code("XYZ"), None);
        assert_eq!("all".parse::<TaskSelection>().unwrap(), TaskSelection::All);
        assert_eq!(
            "vid".parse::<TaskSelection>().unwrap(),
            TaskSelection::Task(TaskKind::Video)
        );
    }

    #[test]
    fn sample_validity_rules() {
        assert!(GazeSample::new(0.0, [0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).valid);
        assert!(!GazeSample::new(0.0, [f64::NAN, 0.0, 1.0, 0.0, 0.0, 1.0]).valid);
        assert!(!GazeSample::new(0.0, [0.0, 0.0, 0.1, 0.0, 0.0, 1.0]).valid);
    }

    #[test]
    fn meta_ranges_enforced() {
        assert!(RecordingMeta::new("a", 4, 1, TaskKind::Video, Source::Real).is_err());
        assert!(RecordingMeta::new("a", 1, 3, TaskKind::Video, Source::Real).is_err());
        assert!(RecordingMeta::new("a", 3, 2, TaskKind::Video, Source::Real).is_ok());
    }
}

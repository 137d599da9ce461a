use std::path::Path;

use regex::Regex;

use super::{GazeIoError, RecordingMeta, Source, TaskKind};

/// `S_<round><subject>_S<session>_<TASK>.csv`, e.g. `S_1042_S1_TEX.csv`.
pub const DEFAULT_META_PATTERN: &str =
    r"^S_(?P<round>\d)(?P<subject>\d+)_S(?P<session>\d)_(?P<task>[A-Za-z]{3})\.csv$";

/// Filename template with named groups `round`, `subject`, `session` and `task`.
#[derive(Debug, Clone)]
pub struct MetaPattern {
    regex: Regex,
}

impl MetaPattern {
    pub fn new(pattern: &str) -> Result<Self, GazeIoError> {
        let regex = Regex::new(pattern).map_err(|e| GazeIoError::InvalidPattern(e.to_string()))?;
        let names: Vec<&str> = regex.capture_names().flatten().collect();
        for required in ["round", "subject", "session", "task"] {
            if !names.contains(&required) {
                return Err(GazeIoError::InvalidPattern(format!("missing named group `{required}`")));
            }
        }
        Ok(Self { regex })
    }

    pub fn as_str(&self) -> &str {
        self.regex.as_str()
    }
}

impl Default for MetaPattern {
    fn default() -> Self {
        Self::new(DEFAULT_META_PATTERN).expect("default pattern is valid")
    }
}

/// Extracts recording metadata from the file name component of `filename`.
pub fn parse_path_meta(filename: &str, pattern: &MetaPattern) -> Result<RecordingMeta, GazeIoError> {
    let name = Path::new(filename)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(filename);
    let caps = pattern
        .regex
        .captures(name)
        .ok_or_else(|| GazeIoError::PatternMismatch(name.to_string()))?;
    let number = |group: &str| -> Result<u8, GazeIoError> {
        caps[group]
            .parse::<u8>()
            .map_err(|_| GazeIoError::InvalidMeta(format!("{group} `{}` is not a number", &caps[group])))
    };
    let task_code = &caps["task"];
    let task = TaskKind::from_code(task_code).ok_or_else(|| GazeIoError::UnknownTask(task_code.to_string()))?;
    RecordingMeta::new(&caps["subject"], number("round")?, number("session")?, task, Source::Real)
}

/// File name matching [`DEFAULT_META_PATTERN`] for `meta`.
pub fn default_file_name(meta: &RecordingMeta) -> String {
    format!("S_{}{}_S{}_{}.csv", meta.round, meta.subject_id, meta.session, meta.task.code())
}

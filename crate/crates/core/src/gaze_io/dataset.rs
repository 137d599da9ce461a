use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{parse_path_meta, parse_recording_csv, GazeIoError, MetaPattern, ParseOptions, Recording, RecordingMeta, Source, TaskKind};

/// Restricts which files are parsed. `None` means no restriction.
#[derive(Debug, Clone, Default)]
pub struct DatasetFilter {
    pub rounds: Option<BTreeSet<u8>>,
    pub tasks: Option<BTreeSet<TaskKind>>,
    pub subjects: Option<BTreeSet<String>>,
}

impl DatasetFilter {
    pub fn accepts(&self, meta: &RecordingMeta) -> bool {
        self.rounds.as_ref().is_none_or(|r| r.contains(&meta.round))
            && self.tasks.as_ref().is_none_or(|t| t.contains(&meta.task))
            && self.subjects.as_ref().is_none_or(|s| s.contains(&meta.subject_id))
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub pattern: MetaPattern,
    pub parse: ParseOptions,
    /// Provenance stamped on every loaded recording.
    pub source: Source,
}

#[derive(Debug)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    /// Files whose name matched and passed the filter but failed to parse.
    pub failures: Vec<(PathBuf, GazeIoError)>,
    /// Files whose name did not match the metadata pattern.
    pub skipped: Vec<PathBuf>,
}

/// Loads every matching recording below `root`, in lexicographic path order.
///
/// The filter is applied to filename metadata before a file is opened.
/// Per-file failures are collected; only an empty result is an error.
pub fn load_dataset(root: &Path, filter: &DatasetFilter, options: &LoadOptions) -> Result<Dataset, GazeIoError> {
    if !root.is_dir() {
        return Err(GazeIoError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        });
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    paths.sort();

    let mut dataset = Dataset {
        recordings: Vec::new(),
        failures: Vec::new(),
        skipped: Vec::new(),
    };
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let mut meta = match parse_path_meta(name, &options.pattern) {
            Ok(meta) => meta,
            Err(GazeIoError::PatternMismatch(_)) => {
                dataset.skipped.push(path);
                continue;
            }
            Err(e) => {
                dataset.failures.push((path, e));
                continue;
            }
        };
        if !filter.accepts(&meta) {
            continue;
        }
        meta.source = options.source;
        let parsed = File::open(&path)
            .map_err(|source| GazeIoError::Io {
                path: path.clone(),
                source,
            })
            .and_then(|f| parse_recording_csv(BufReader::new(f), meta, &options.parse));
        match parsed {
            Ok(rec) => dataset.recordings.push(rec),
            Err(e) => dataset.failures.push((path, e)),
        }
    }
    if dataset.recordings.is_empty() {
        return Err(GazeIoError::EmptyDataset(root.to_path_buf()));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const BODY: &str = "n,clx,cly,clz,crx,cry,crz\n0,0.01,0.02,0.99,0.015,0.02,0.99\n4,0.01,0.02,0.99,0.015,0.02,0.99\n";

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for name in [
            "S_1001_S1_TEX.csv",
            "S_1001_S2_TEX.csv",
            "S_1002_S1_RAN.csv",
            "S_1002_S2_RAN.csv",
            "S_3001_S1_TEX.csv",
            "S_3002_S1_RAN.csv",
        ] {
            fs::write(dir.path().join(name), BODY).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        dir
    }

    #[test]
    fn round_filter_selects_matching_files() {
        let dir = fixture();
        let filter = DatasetFilter {
            rounds: Some([1].into()),
            ..Default::default()
        };
        let ds = load_dataset(dir.path(), &filter, &LoadOptions::default()).unwrap();
        assert_eq!(ds.recordings.len(), 4);
        assert!(ds.recordings.iter().all(|r| r.meta.round == 1));
        assert_eq!(ds.skipped.len(), 1);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let dir = fixture();
        let filter = DatasetFilter {
            tasks: Some([TaskKind::Video].into()),
            ..Default::default()
        };
        assert!(matches!(
            load_dataset(dir.path(), &filter, &LoadOptions::default()),
            Err(GazeIoError::EmptyDataset(_))
        ));
    }

    #[test]
    fn loading_is_deterministic_and_sorted() {
        let dir = fixture();
        let a = load_dataset(dir.path(), &DatasetFilter::default(), &LoadOptions::default()).unwrap();
        let b = load_dataset(dir.path(), &DatasetFilter::default(), &LoadOptions::default()).unwrap();
        assert_eq!(a.recordings, b.recordings);
        let order: Vec<(u8, String, u8)> = a
            .recordings
            .iter()
            .map(|r| (r.meta.round, r.meta.subject_id.clone(), r.meta.session))
            .collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn broken_files_are_collected_not_fatal() {
        let dir = fixture();
        fs::write(dir.path().join("S_1003_S1_VID.csv"), "n,clx\n1,2\n").unwrap();
        let ds = load_dataset(dir.path(), &DatasetFilter::default(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.recordings.len(), 6);
        assert_eq!(ds.failures.len(), 1);
        assert!(matches!(ds.failures[0].1, GazeIoError::MissingColumn(_)));
    }
}

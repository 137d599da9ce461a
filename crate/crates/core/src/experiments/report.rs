//! Table emission, drift summaries and the report directory layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, ExperimentReport, ModelKind, Protocol, ProtocolRun, ReportRow};
use crate::gaze_io::TaskSelection;

/// Recovery ratios below this are flagged.
pub const RECOVERY_THRESHOLD: f64 = 0.9;

/// Full-scale All-row accuracies (percent) per protocol, in DenseNet,
/// Transformer, XG Boost order. Shown next to desk-scale results for scale.
pub const REFERENCE_ALL_ROW: [(Protocol, [f64; 3]); 3] = [
    (Protocol::ShortTerm, [97.09, 97.20, 79.31]),
    (Protocol::LongTerm, [7.79, 3.01, 4.85]),
    (Protocol::Retrained, [98.71, 96.52, 93.25]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

const CSV_HEADER: [&str; 7] = ["protocol", "task", "DenseNet", "Transformer", "XG Boost", "train_round", "test_round"];

fn percent(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

/// Six task rows in canonical order by three model columns plus round
/// annotations. Models or tasks not in the report are shown as `-`
/// (markdown) or left empty (CSV). CSV cells keep full precision fractions.
pub fn emit_table(report: &ExperimentReport, format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            let _ = writeln!(out, "### {}\n", report.protocol.title());
            let _ = writeln!(out, "| Task | DenseNet | Transformer | XG Boost | Train Round | Test Round |");
            let _ = writeln!(out, "|------|---------:|------------:|---------:|-------------|------------|");
            for task in TaskSelection::table_rows() {
                let cells: Vec<String> = ModelKind::ALL.iter().map(|&m| percent(report.accuracy(task, m))).collect();
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    task.label(),
                    cells[0],
                    cells[1],
                    cells[2],
                    report.protocol.train_round_label(),
                    report.protocol.test_round_label()
                );
            }
            out
        }
        TableFormat::Csv => emit_reports_csv(std::slice::from_ref(report)),
    }
}

/// One CSV document holding the rows of several reports.
pub fn emit_reports_csv(reports: &[ExperimentReport]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("in-memory write");
    for report in reports {
        for task in TaskSelection::table_rows() {
            let mut record = vec![report.protocol.name().to_string(), task.label().to_string()];
            record.extend(
                ModelKind::ALL
                    .iter()
                    .map(|&m| report.accuracy(task, m).map_or_else(String::new, |v| v.to_string())),
            );
            record.push(report.protocol.train_round_label().to_string());
            record.push(report.protocol.test_round_label().to_string());
            writer.write_record(&record).expect("in-memory write");
        }
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Parses [`emit_reports_csv`] output back into rows per protocol.
/// Rows without any accuracy are dropped.
pub fn parse_table_csv(text: &str) -> Result<BTreeMap<Protocol, Vec<ReportRow>>, ExperimentError> {
    let bad = |m: String| ExperimentError::Table(m);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out: BTreeMap<Protocol, Vec<ReportRow>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let protocol = Protocol::ALL
            .into_iter()
            .find(|p| p.name() == &record[0])
            .ok_or_else(|| bad(format!("unknown protocol `{}`", &record[0])))?;
        let task: TaskSelection = record[1].parse().map_err(|_| bad(format!("unknown task `{}`", &record[1])))?;
        let mut cells = BTreeMap::new();
        for (k, &model) in ModelKind::ALL.iter().enumerate() {
            let field = &record[2 + k];
            if !field.is_empty() {
                let v: f64 = field.parse().map_err(|_| bad(format!("bad accuracy `{field}`")))?;
                cells.insert(model, v);
            }
        }
        if !cells.is_empty() {
            out.entry(protocol).or_default().push(ReportRow { task, cells });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub task: TaskSelection,
    pub model: ModelKind,
    pub short: f64,
    pub long: f64,
    pub retrained: f64,
    /// `long / short`; `None` when the short-term accuracy is zero.
    pub degradation: Option<f64>,
    /// `retrained / short`; `None` when the short-term accuracy is zero.
    pub recovery: Option<f64>,
    /// Recovery below [`RECOVERY_THRESHOLD`] (or undefined).
    pub recovery_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub entries: Vec<DriftEntry>,
}

impl DriftSummary {
    pub fn failures(&self) -> impl Iterator<Item = &DriftEntry> {
        self.entries.iter().filter(|e| e.recovery_failed)
    }

    pub fn entry(&self, task: TaskSelection, model: ModelKind) -> Option<&DriftEntry> {
        self.entries.iter().find(|e| e.task == task && e.model == model)
    }
}

/// Degradation and recovery ratios for every (task, model) cell present in
/// all three reports.
pub fn drift_report(
    short: &ExperimentReport,
    long: &ExperimentReport,
    retrained: &ExperimentReport,
) -> Result<DriftSummary, ExperimentError> {
    let roles = [
        (short, Protocol::ShortTerm),
        (long, Protocol::LongTerm),
        (retrained, Protocol::Retrained),
    ];
    for (report, expected) in roles {
        if report.protocol != expected {
            return Err(ExperimentError::MismatchedReports(format!(
                "expected a {expected} report, got {}",
                report.protocol
            )));
        }
    }
    if long.dataset != short.dataset || retrained.dataset != short.dataset {
        return Err(ExperimentError::MismatchedReports("dataset descriptors differ".into()));
    }
    if long.models != short.models || retrained.models != short.models {
        return Err(ExperimentError::MismatchedReports("model selections differ".into()));
    }
    let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
    let mut entries = Vec::new();
    for row in &short.rows {
        for (&model, &s) in &row.cells {
            let (Some(l), Some(r)) = (long.accuracy(row.task, model), retrained.accuracy(row.task, model)) else {
                continue;
            };
            let recovery = ratio(r, s);
            entries.push(DriftEntry {
                task: row.task,
                model,
                short: s,
                long: l,
                retrained: r,
                degradation: ratio(l, s),
                recovery,
                recovery_failed: recovery.is_none_or(|v| v < RECOVERY_THRESHOLD),
            });
        }
    }
    Ok(DriftSummary { entries })
}

fn describe_dataset(report: &ExperimentReport) -> String {
    serde_json::to_string(&report.dataset).expect("descriptor serializes")
}

fn markdown_document(runs: &[ProtocolRun]) -> String {
    let mut out = String::from("# Gaze authentication experiment report\n\n");
    if let Some(first) = runs.first() {
        let _ = writeln!(out, "- Master seed: {}", first.report.seed);
        let _ = writeln!(out, "- Dataset: `{}`\n", describe_dataset(&first.report));
    }
    for run in runs {
        out.push_str(&emit_table(&run.report, TableFormat::Markdown));
        let _ = writeln!(out, "\nFingerprint: `{}`\n", run.report.fingerprint);
    }
    out.push_str("## Full-scale reference, All row\n\n");
    out.push_str("Large-cohort accuracies for orientation; not comparable to desk-scale runs.\n\n");
    out.push_str("| Protocol | DenseNet | Transformer | XG Boost |\n|----------|---------:|------------:|---------:|\n");
    for (protocol, values) in REFERENCE_ALL_ROW {
        let _ = writeln!(
            out,
            "| {} | {:.2}% | {:.2}% | {:.2}% |",
            protocol.name(),
            values[0],
            values[1],
            values[2]
        );
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

/// Writes `report.md`, `report.csv`, `fingerprint.txt` and
/// `checkpoints/<protocol>/<task>/<file>` under `out`.
pub fn write_report_dir(out: &Path, runs: &[ProtocolRun]) -> Result<(), ExperimentError> {
    write_file(&out.join("report.md"), &markdown_document(runs))?;
    let reports: Vec<ExperimentReport> = runs.iter().map(|r| r.report.clone()).collect();
    write_file(&out.join("report.csv"), &emit_reports_csv(&reports))?;
    let mut fingerprints = String::new();
    for r in &reports {
        let _ = writeln!(fingerprints, "{} {}", r.protocol.name(), r.fingerprint);
    }
    write_file(&out.join("fingerprint.txt"), &fingerprints)?;
    for run in runs {
        for artifact in &run.artifacts {
            let path = out
                .join("checkpoints")
                .join(run.report.protocol.name())
                .join(artifact.task.label())
                .join(&artifact.file_name);
            write_file(&path, &artifact.contents)?;
        }
    }
    Ok(())
}

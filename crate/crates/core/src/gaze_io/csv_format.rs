use std::io::{Read, Write};

use super::{GazeIoError, GazeSample, Recording, RecordingMeta, DEFAULT_SAMPLE_RATE_HZ};

/// Timestamp column followed by the six gaze-direction components.
pub const REQUIRED_COLUMNS: [&str; 7] = ["n", "clx", "cly", "clz", "crx", "cry", "crz"];

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Extra cell values treated as missing, besides empty cells and `NaN`.
    pub missing_sentinels: Vec<String>,
    pub nominal_rate_hz: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            missing_sentinels: Vec::new(),
            nominal_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        }
    }
}

impl ParseOptions {
    fn cell(&self, raw: &str) -> Option<f64> {
        let s = raw.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("nan") || self.missing_sentinels.iter().any(|m| m == s) {
            return None;
        }
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
}

/// Reads one recording. Columns are bound by header name; extra columns are ignored.
///
/// Rows with a missing or unparseable coordinate become `valid = false`
/// samples so that timing stays uniform. A missing timestamp is filled with
/// the previous timestamp plus one nominal sample period.
pub fn parse_recording_csv<R: Read>(
    reader: R,
    meta: RecordingMeta,
    options: &ParseOptions,
) -> Result<Recording, GazeIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GazeIoError::MissingColumn(name.to_string()))?;
    }

    let period_ms = 1000.0 / options.nominal_rate_hz;
    let mut samples: Vec<GazeSample> = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let value = |i: usize| record.get(idx[i]).and_then(|c| options.cell(c));
        let mut coords = [f64::NAN; 6];
        for (c, slot) in coords.iter_mut().enumerate() {
            if let Some(v) = value(c + 1) {
                *slot = v;
            }
        }
        let sample = match value(0) {
            Some(t) => GazeSample::new(t, coords),
            None => {
                let t = samples.last().map_or(0.0, |s| s.t_ms + period_ms);
                GazeSample {
                    t_ms: t,
                    coords,
                    valid: false,
                }
            }
        };
        if let Some(prev) = samples.last() {
            if sample.t_ms < prev.t_ms {
                return Err(GazeIoError::NonMonotonicTime { row: row_no + 1 });
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(GazeIoError::EmptyRecording);
    }
    Ok(Recording {
        meta,
        samples,
        nominal_rate_hz: options.nominal_rate_hz,
    })
}

/// Writes the seven required columns; finite values round-trip exactly.
pub fn write_recording_csv<W: Write>(recording: &Recording, writer: W) -> Result<(), GazeIoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(REQUIRED_COLUMNS)?;
    let mut row: Vec<String> = Vec::with_capacity(7);
    for s in &recording.samples {
        row.clear();
        row.push(s.t_ms.to_string());
        row.extend(s.coords.iter().map(|c| c.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|source| GazeIoError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

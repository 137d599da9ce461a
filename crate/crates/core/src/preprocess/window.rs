use serde::{Deserialize, Serialize};

use super::{normalize_time, Normalizer, PreprocessError, CHANNELS};
use crate::autodiff::Array;
use crate::gaze_io::{Recording, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Time channel counts from the first sample of each window.
    #[default]
    WindowRelative,
    /// Time channel carries the recording timestamp.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub min_valid_fraction: f64,
    /// Longest run of invalid samples that is bridged by interpolation.
    pub max_gap: usize,
    pub time_mode: TimeMode,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_len: 1250,
            sample_rate_hz: 250.0,
            min_valid_fraction: 0.95,
            max_gap: 12,
            time_mode: TimeMode::WindowRelative,
        }
    }
}

impl WindowConfig {
    /// Normalized time plus six gaze coordinates.
    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.window_len < 2 {
            return Err(PreprocessError::InvalidConfig(format!("window_len {} < 2", self.window_len)));
        }
        if !(self.min_valid_fraction > 0.0 && self.min_valid_fraction <= 1.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "min_valid_fraction {} outside (0, 1]",
                self.min_valid_fraction
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(PreprocessError::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub round: u8,
    pub session: u8,
    pub task: TaskKind,
}

/// One segmented window: `C×T` values in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Vec<f64>,
    pub label: String,
    pub provenance: Provenance,
}

/// Windows × channels × time, with a subject label and provenance per window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    channels: usize,
    window_len: usize,
    data: Vec<f64>,
    labels: Vec<String>,
    provenance: Vec<Provenance>,
    normalized: bool,
}

impl WindowSet {
    pub fn new(channels: usize, window_len: usize, normalized: bool) -> Self {
        Self {
            channels,
            window_len,
            data: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
            normalized,
        }
    }

    pub fn push(&mut self, window: Window) -> Result<(), PreprocessError> {
        if window.data.len() != self.channels * self.window_len {
            return Err(PreprocessError::ShapeMismatch(format!(
                "window of {} values for {}x{}",
                window.data.len(),
                self.channels,
                self.window_len
            )));
        }
        self.data.extend_from_slice(&window.data);
        self.labels.push(window.label);
        self.provenance.push(window.provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(W, C, T)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.len(), self.channels, self.window_len)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn mark_normalized(&mut self) {
        self.normalized = true;
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let n = self.channels * self.window_len;
        &self.data[i * n..(i + 1) * n]
    }

    pub(crate) fn window_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.channels * self.window_len;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Window `i` as a `C×T` array.
    pub fn window_array(&self, i: usize) -> Array {
        Array::from_vec(&[self.channels, self.window_len], self.window(i).to_vec()).expect("window shape")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Windows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::new(self.channels, self.window_len, self.normalized);
        for &i in indices {
            out.data.extend_from_slice(self.window(i));
            out.labels.push(self.labels[i].clone());
            out.provenance.push(self.provenance[i]);
        }
        out
    }

    /// Windows whose provenance satisfies `keep`, order preserved.
    pub fn filter(&self, keep: impl Fn(&Provenance) -> bool) -> WindowSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.provenance[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&WindowSet]) -> Result<WindowSet, PreprocessError> {
        let first = parts.first().ok_or(PreprocessError::EmptyWindowSet)?;
        let mut out = WindowSet::new(first.channels, first.window_len, first.normalized);
        for p in parts {
            if (p.channels, p.window_len, p.normalized) != (out.channels, out.window_len, out.normalized) {
                return Err(PreprocessError::ShapeMismatch("cannot concatenate differing window sets".into()));
            }
            out.data.extend_from_slice(&p.data);
            out.labels.extend(p.labels.iter().cloned());
            out.provenance.extend_from_slice(&p.provenance);
        }
        Ok(out)
    }
}

/// Linearly bridges runs of at most `config.max_gap` invalid samples that
/// have valid neighbors on both sides. Longer runs and runs touching either
/// end of the recording stay invalid.
pub fn clean_recording(recording: &Recording, config: &WindowConfig) -> Recording {
    let mut out = recording.clone();
    let s = &mut out.samples;
    let mut i = 0;
    while i < s.len() {
        if s[i].valid {
            i += 1;
            continue;
        }
        let start = i;
        while i < s.len() && !s[i].valid {
            i += 1;
        }
        let run = i - start;
        if start == 0 || i == s.len() || run > config.max_gap {
            continue;
        }
        let (before, after) = (s[start - 1].coords, s[i].coords);
        for (k, sample) in s[start..i].iter_mut().enumerate() {
            let frac = (k + 1) as f64 / (run + 1) as f64;
            for c in 0..6 {
                sample.coords[c] = before[c] + frac * (after[c] - before[c]);
            }
            sample.valid = true;
        }
    }
    out
}

/// Consecutive non-overlapping windows from the first sample, unnormalized.
///
/// Windows with a valid fraction below `min_valid_fraction` are dropped.
/// Invalid samples left inside a kept window take the previous valid value
/// (the next one at the window start). Channel 0 holds time in seconds.
pub fn segment_raw(recording: &Recording, config: &WindowConfig) -> Vec<Window> {
    let t_len = config.window_len;
    let n_windows = recording.samples.len() / t_len;
    let provenance = Provenance {
        round: recording.meta.round,
        session: recording.meta.session,
        task: recording.meta.task,
    };
    let mut out = Vec::new();
    for w in 0..n_windows {
        let chunk = &recording.samples[w * t_len..(w + 1) * t_len];
        let valid = chunk.iter().filter(|s| s.valid).count();
        if (valid as f64) < config.min_valid_fraction * t_len as f64 || valid == 0 {
            continue;
        }
        let origin = match config.time_mode {
            TimeMode::WindowRelative => chunk[0].t_ms,
            TimeMode::Absolute => 0.0,
        };
        let mut data = vec![0.0; CHANNELS * t_len];
        let first_valid = chunk.iter().position(|s| s.valid).expect("window has a valid sample");
        let mut last = chunk[first_valid].coords;
        for (t, s) in chunk.iter().enumerate() {
            if s.valid {
                last = s.coords;
            }
            data[t] = normalize_time(s.t_ms - origin);
            for c in 0..6 {
                data[(c + 1) * t_len + t] = last[c];
            }
        }
        out.push(Window {
            data,
            label: recording.meta.subject_id.clone(),
            provenance,
        });
    }
    out
}

/// Segments a cleaned recording and normalizes each window.
pub fn segment_windows(recording: &Recording, normalizer: &Normalizer, config: &WindowConfig) -> Vec<Window> {
    let t_len = config.window_len;
    let mut windows = segment_raw(recording, config);
    for w in &mut windows {
        for (c, _) in normalizer.channels.iter().enumerate() {
            for v in &mut w.data[(c + 1) * t_len..(c + 2) * t_len] {
                *v = normalizer.normalize(*v, c).expect("channel in range");
            }
        }
    }
    windows
}

/// Cleans and segments every recording, concatenating windows in input order.
pub fn build_raw_windowset(recordings: &[Recording], config: &WindowConfig) -> Result<WindowSet, PreprocessError> {
    config.validate()?;
    let mut set = WindowSet::new(CHANNELS, config.window_len, false);
    for rec in recordings {
        for w in segment_raw(&clean_recording(rec, config), config) {
            set.push(w)?;
        }
    }
    if set.is_empty() {
        return Err(PreprocessError::EmptyWindowSet);
    }
    Ok(set)
}

/// Cleaned, segmented and normalized windows of all recordings, in input order.
pub fn build_windowset(
    recordings: &[Recording],
    normalizer: &Normalizer,
    config: &WindowConfig,
) -> Result<WindowSet, PreprocessError> {
    let mut set = build_raw_windowset(recordings, config)?;
    normalizer.apply(&mut set)?;
    Ok(set)
}

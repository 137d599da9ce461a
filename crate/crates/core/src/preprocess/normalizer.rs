use serde::{Deserialize, Serialize};

use super::{PreprocessError, WindowSet, SPATIAL_CHANNELS};
use crate::gaze_io::Recording;

pub const NORMALIZER_FORMAT_VERSION: u32 = 1;

/// Milliseconds to seconds.
pub fn normalize_time(t_ms: f64) -> f64 {
    t_ms / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Separate extrema per coordinate channel.
    #[default]
    PerChannel,
    /// One pair of extrema shared by all six coordinate channels.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// `min == max`; such a channel normalizes to 0.
    pub degenerate: bool,
}

/// Fitted min/max spatial normalization plus the timestamp divisor.
///
/// Only obtainable through fitting or loading, so an instance is always fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub format_version: u32,
    pub time_divisor: f64,
    pub scope: NormalizationScope,
    pub channels: Vec<ChannelRange>,
}

impl Normalizer {
    fn from_extrema(extrema: [(f64, f64); 6], scope: NormalizationScope) -> Result<Self, PreprocessError> {
        for (i, (lo, hi)) in extrema.iter().enumerate() {
            if lo > hi {
                return Err(PreprocessError::NoValidSamples(SPATIAL_CHANNELS[i].to_string()));
            }
        }
        let extrema = match scope {
            NormalizationScope::PerChannel => extrema,
            NormalizationScope::Global => {
                let lo = extrema.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
                let hi = extrema.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
                [(lo, hi); 6]
            }
        };
        Ok(Self {
            format_version: NORMALIZER_FORMAT_VERSION,
            time_divisor: 1000.0,
            scope,
            channels: extrema
                .iter()
                .zip(SPATIAL_CHANNELS)
                .map(|(&(min, max), name)| ChannelRange {
                    name: name.to_string(),
                    min,
                    max,
                    degenerate: min == max,
                })
                .collect(),
        })
    }

    /// Extrema over every valid sample of the given recordings.
    pub fn fit(recordings: &[Recording], scope: NormalizationScope) -> Result<Self, PreprocessError> {
        let mut extrema = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        for s in recordings.iter().flat_map(|r| &r.samples).filter(|s| s.valid) {
            for (e, &v) in extrema.iter_mut().zip(&s.coords) {
                e.0 = e.0.min(v);
                e.1 = e.1.max(v);
            }
        }
        Self::from_extrema(extrema, scope)
    }

    /// Extrema over the spatial channels of an unnormalized window set.
    pub fn fit_windows(windows: &WindowSet, scope: NormalizationScope) -> Result<Self, PreprocessError> {
        if windows.is_normalized() {
            return Err(PreprocessError::InvalidConfig("cannot fit on already normalized windows".into()));
        }
        let mut extrema = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        let t = windows.window_len();
        for w in 0..windows.len() {
            let data = windows.window(w);
            for (c, e) in extrema.iter_mut().enumerate() {
                for &v in &data[(c + 1) * t..(c + 2) * t] {
                    e.0 = e.0.min(v);
                    e.1 = e.1.max(v);
                }
            }
        }
        Self::from_extrema(extrema, scope)
    }

    /// `2·(x − min)/(max − min) − 1`; 0 for a degenerate channel. No clipping.
    pub fn normalize(&self, x: f64, channel: usize) -> Result<f64, PreprocessError> {
        let range = self.channels.get(channel).ok_or(PreprocessError::InvalidChannel(channel))?;
        Ok(scale(x, range))
    }

    /// Normalizes the spatial channels of a raw window set in place.
    pub fn apply(&self, windows: &mut WindowSet) -> Result<(), PreprocessError> {
        if windows.is_normalized() {
            return Err(PreprocessError::InvalidConfig("window set is already normalized".into()));
        }
        let t = windows.window_len();
        for w in 0..windows.len() {
            let data = windows.window_mut(w);
            for (c, range) in self.channels.iter().enumerate() {
                for v in &mut data[(c + 1) * t..(c + 2) * t] {
                    *v = scale(*v, range);
                }
            }
        }
        windows.mark_normalized();
        Ok(())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("normalizer serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, PreprocessError> {
        let n: Normalizer = serde_json::from_str(text).map_err(|e| PreprocessError::Format(e.to_string()))?;
        if n.format_version != NORMALIZER_FORMAT_VERSION {
            return Err(PreprocessError::Format(format!("unsupported format version {}", n.format_version)));
        }
        let names: Vec<&str> = n.channels.iter().map(|c| c.name.as_str()).collect();
        if names != SPATIAL_CHANNELS {
            return Err(PreprocessError::Format(format!("unexpected channels {names:?}")));
        }
        if n.channels.iter().any(|c| !(c.max >= c.min) || c.degenerate != (c.min == c.max)) {
            return Err(PreprocessError::Format("inconsistent channel range".into()));
        }
        Ok(n)
    }
}

fn scale(x: f64, range: &ChannelRange) -> f64 {
    if range.degenerate {
        0.0
    } else {
        2.0 * (x - range.min) / (range.max - range.min) - 1.0
    }
}

/// Per-channel fit over the valid samples of the training recordings.
pub fn fit_normalizer(train_recordings: &[Recording]) -> Result<Normalizer, PreprocessError> {
    Normalizer::fit(train_recordings, NormalizationScope::PerChannel)
}

/// Normalizes coordinate channel `channel` (0 = clx … 5 = crz).
pub fn normalize_value(x: f64, channel: usize, normalizer: &Normalizer) -> Result<f64, PreprocessError> {
    normalizer.normalize(x, channel)
}

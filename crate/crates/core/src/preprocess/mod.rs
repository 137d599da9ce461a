//! Timestamp and min/max coordinate normalization, gap cleaning and
//! segmentation into fixed-length `channels × time` windows.

mod normalizer;
mod window;

pub use normalizer::{
    fit_normalizer, normalize_time, normalize_value, ChannelRange, NormalizationScope, Normalizer,
    NORMALIZER_FORMAT_VERSION,
};
pub use window::{
    build_raw_windowset, build_windowset, clean_recording, segment_raw, segment_windows, Provenance, TimeMode, Window,
    WindowConfig, WindowSet,
};

use thiserror::Error;

pub const SPATIAL_CHANNELS: [&str; 6] = ["clx", "cly", "clz", "crx", "cry", "crz"];

/// Time channel plus the six coordinates.
pub const CHANNELS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("no valid samples for channel {0}")]
    NoValidSamples(String),
    #[error("no windows survived segmentation")]
    EmptyWindowSet,
    #[error("coordinate channel index {0} out of range")]
    InvalidChannel(usize),
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("normalizer document: {0}")]
    Format(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze_io::{GazeSample, Recording, RecordingMeta, Source, TaskKind};
    use proptest::prelude::*;

    fn meta(subject: &str) -> RecordingMeta {
        RecordingMeta::new(subject, 1, 1, TaskKind::Video, Source::Synthetic).unwrap()
    }

    /// Recording whose every coordinate equals `f(i)` scaled per channel.
    fn recording(n: usize, f: impl Fn(usize) -> f64) -> Recording {
        let samples = (0..n)
            .map(|i| {
                let v = f(i);
                GazeSample {
                    t_ms: i as f64 * 4.0,
                    coords: [v, v * 0.5, 0.9 + v * 0.1, v, -v, 0.95],
                    valid: true,
                }
            })
            .collect();
        Recording {
            meta: meta("001"),
            samples,
            nominal_rate_hz: 250.0,
        }
    }

    #[test]
    fn time_normalization() {
        assert_eq!(normalize_time(1000.0), 1.0);
        assert_eq!(normalize_time(0.0), 0.0);
        assert_eq!(normalize_time(4.0), 0.004);
    }

    #[test]
    fn fit_takes_extrema_of_valid_samples() {
        let vals = [-0.2, 0.0, 0.6];
        let mut rec = recording(3, |i| vals[i]);
        rec.samples.push(GazeSample {
            t_ms: 12.0,
            coords: [5.0; 6],
            valid: false,
        });
        let n = fit_normalizer(&[rec]).unwrap();
        assert_eq!((n.channels[0].min, n.channels[0].max), (-0.2, 0.6));
        assert!(n.channels[5].degenerate);
        assert!(!n.channels[0].degenerate);
    }

    #[test]
    fn all_invalid_channel_is_an_error() {
        let mut rec = recording(3, |i| i as f64);
        rec.samples.iter_mut().for_each(|s| s.valid = false);
        assert!(matches!(fit_normalizer(&[rec]), Err(PreprocessError::NoValidSamples(_))));
    }

    #[test]
    fn constant_channel_flags_degenerate_and_maps_to_zero() {
        let rec = recording(2, |_| 0.5);
        let n = fit_normalizer(&[rec]).unwrap();
        assert!(n.channels.iter().all(|c| c.degenerate));
        assert_eq!(normalize_value(0.5, 0, &n).unwrap(), 0.0);
    }

    #[test]
    fn endpoints_and_midpoint() {
        let rec = recording(10, |i| i as f64 * 0.037 - 0.11);
        let n = fit_normalizer(&[rec]).unwrap();
        for (c, range) in n.channels.iter().enumerate().filter(|(_, r)| !r.degenerate) {
            assert!((normalize_value(range.min, c, &n).unwrap() + 1.0).abs() < 1e-12);
            assert!((normalize_value(range.max, c, &n).unwrap() - 1.0).abs() < 1e-12);
            let mid = (range.min + range.max) / 2.0;
            assert!(normalize_value(mid, c, &n).unwrap().abs() < 1e-12);
        }
        // out-of-range values are not clipped
        let above = n.channels[0].max + 1.0;
        assert!(normalize_value(above, 0, &n).unwrap() > 1.0);
        assert!(normalize_value(0.0, 6, &n).is_err());
    }

    #[test]
    fn global_scope_shares_extrema() {
        let rec = recording(10, |i| i as f64 * 0.01);
        let n = Normalizer::fit(&[rec], NormalizationScope::Global).unwrap();
        let first = (n.channels[0].min, n.channels[0].max);
        assert!(n.channels.iter().all(|c| (c.min, c.max) == first));
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let rec = recording(50, |i| (i as f64 * 0.7).sin() * 0.3);
        let n = fit_normalizer(&[rec.clone()]).unwrap();
        let back = Normalizer::from_text(&n.to_text()).unwrap();
        assert_eq!(back, n);
        let cfg = WindowConfig {
            window_len: 10,
            ..Default::default()
        };
        let a = build_windowset(&[rec.clone()], &n, &cfg).unwrap();
        let b = build_windowset(&[rec], &back, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(Normalizer::from_text("{\"format_version\":2}").is_err());
    }

    #[test]
    fn cleaning_interpolates_short_gaps_only() {
        let mut rec = recording(5, |i| if i == 2 { 0.1 } else { 0.0 });
        rec.samples[1].coords[0] = 0.0;
        rec.samples[3].coords[0] = 0.2;
        rec.samples[2].valid = false;
        let cfg = WindowConfig::default();
        let cleaned = clean_recording(&rec, &cfg);
        assert!(cleaned.samples[2].valid);
        assert!((cleaned.samples[2].coords[0] - 0.1).abs() < 1e-15);

        let mut long = recording(200, |i| i as f64 * 0.001);
        for s in &mut long.samples[50..150] {
            s.valid = false;
        }
        let cleaned = clean_recording(&long, &cfg);
        assert_eq!(cleaned, long);

        let intact = recording(40, |i| i as f64 * 0.001);
        assert_eq!(clean_recording(&intact, &cfg), intact);
    }

    #[test]
    fn segmentation_counts_and_rejection() {
        let cfg = WindowConfig::default();
        assert_eq!(segment_raw(&recording(3000, |i| i as f64 * 1e-4), &cfg).len(), 2);
        assert_eq!(segment_raw(&recording(1249, |i| i as f64 * 1e-4), &cfg).len(), 0);
        let mut holey = recording(1250, |i| i as f64 * 1e-4);
        for s in holey.samples.iter_mut().step_by(10) {
            s.valid = false;
        }
        assert_eq!(segment_raw(&holey, &cfg).len(), 0);
    }

    #[test]
    fn window_time_channel_is_relative_by_default() {
        let cfg = WindowConfig {
            window_len: 5,
            ..Default::default()
        };
        let windows = segment_raw(&recording(10, |i| i as f64 * 0.01), &cfg);
        assert_eq!(&windows[1].data[..5], &[0.0, 0.004, 0.008, 0.012, 0.016]);
        let abs = WindowConfig {
            time_mode: TimeMode::Absolute,
            ..cfg
        };
        let windows = segment_raw(&recording(10, |i| i as f64 * 0.01), &abs);
        assert_eq!(windows[1].data[0], 0.02);
    }

    #[test]
    fn build_windowset_concatenates_in_order() {
        let cfg = WindowConfig {
            window_len: 5,
            ..Default::default()
        };
        let mut a = recording(10, |i| i as f64 * 0.01);
        a.meta.subject_id = "a".into();
        let mut b = recording(12, |i| 0.5 - i as f64 * 0.01);
        b.meta.subject_id = "b".into();
        let n = fit_normalizer(&[a.clone(), b.clone()]).unwrap();
        let set = build_windowset(&[a, b], &n, &cfg).unwrap();
        assert_eq!(set.shape(), (4, 7, 5));
        assert_eq!(set.labels(), ["a", "a", "b", "b"]);
        let again = build_windowset(&[recording(10, |i| i as f64 * 0.01)], &n, &cfg).unwrap();
        assert_eq!(again.window(0), set.window(0));
        assert!(matches!(
            build_windowset(&[recording(4, |_| 0.0)], &n, &cfg),
            Err(PreprocessError::EmptyWindowSet)
        ));
    }

    #[test]
    fn default_shape_is_7_by_1250() {
        let rec = recording(2500, |i| (i as f64 * 0.01).sin() * 0.2);
        let n = fit_normalizer(&[rec.clone()]).unwrap();
        let set = build_windowset(&[rec], &n, &WindowConfig::default()).unwrap();
        assert_eq!(set.shape(), (2, 7, 1250));
    }

    proptest! {
        #[test]
        fn fitting_then_applying_stays_in_unit_range(
            vals in proptest::collection::vec(-0.5f64..0.5, 20..80),
            len in 2usize..10,
        ) {
            let rec = recording(vals.len(), |i| vals[i]);
            let n = fit_normalizer(&[rec.clone()]).unwrap();
            let cfg = WindowConfig { window_len: len, ..Default::default() };
            if let Ok(set) = build_windowset(&[rec.clone()], &n, &cfg) {
                for w in 0..set.len() {
                    for &v in &set.window(w)[len..] {
                        prop_assert!((-1.0..=1.0).contains(&v));
                    }
                }
                prop_assert_eq!(set.len(), rec.samples.len() / len);
            }
        }
    }
}

//! Fixation–saccade gaze process with per-user behavioral parameters.
//!
//! Gaze is modelled in tangent-plane coordinates `(x, y)` in front of the
//! viewer. Fixations hold a center that drifts slowly at `drift_velocity`
//! per second while each eye sees independent Gaussian jitter. Saccades
//! arrive as a Poisson process at `saccade_rate_hz` and move the center
//! instantaneously by a jump whose mean length is `saccade_amplitude`.
//! Each eye's direction is the unit vector through `(x, y, 1)`, then shifted
//! horizontally by half of `vergence_offset` in opposite directions.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GazeIoError, GazeSample, Recording, RecordingMeta, TaskKind};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticUserParams {
    pub saccade_rate_hz: f64,
    pub saccade_amplitude: f64,
    pub fixation_noise_sigma: f64,
    pub drift_velocity: f64,
    pub vergence_offset: f64,
    pub seed: u64,
}

impl SyntheticUserParams {
    fn behavioral_fields_mut(&mut self) -> [&mut f64; 5] {
        [
            &mut self.saccade_rate_hz,
            &mut self.saccade_amplitude,
            &mut self.fixation_noise_sigma,
            &mut self.drift_velocity,
            &mut self.vergence_offset,
        ]
    }

    pub fn validate(&self) -> Result<(), GazeIoError> {
        let mut copy = *self;
        if copy.behavioral_fields_mut().iter().all(|v| v.is_finite() && **v >= 0.0) {
            Ok(())
        } else {
            Err(GazeIoError::InvalidParameter(format!("behavioral parameters must be finite and non-negative: {self:?}")))
        }
    }
}

fn task_index(task: TaskKind) -> u64 {
    TaskKind::ALL.iter().position(|t| *t == task).unwrap_or(0) as u64
}

/// Generates `floor(duration_s · rate_hz)` samples at exact nominal spacing.
///
/// The random stream is derived from `params.seed` and the recording's
/// round, session and task, so identical inputs give bit-identical output.
pub fn generate_synthetic_recording(
    params: &SyntheticUserParams,
    meta: RecordingMeta,
    duration_s: f64,
    rate_hz: f64,
) -> Result<Recording, GazeIoError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(GazeIoError::InvalidParameter(format!("duration {duration_s} must be positive")));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(GazeIoError::InvalidParameter(format!("rate {rate_hz} must be positive")));
    }
    params.validate()?;
    let n = (duration_s * rate_hz).floor() as usize;
    let mut rng = rng_for(
        params.seed,
        &[meta.round as u64, meta.session as u64, task_index(meta.task)],
    );
    let jitter = Normal::new(0.0, params.fixation_noise_sigma)
        .map_err(|e| GazeIoError::InvalidParameter(e.to_string()))?;
    let dt = 1.0 / rate_hz;
    let saccade_p = (params.saccade_rate_hz * dt).min(1.0);
    let bound = (2.0 * params.saccade_amplitude).max(0.05);
    let half_offset = params.vergence_offset / 2.0;

    let start_angle = rng.random::<f64>() * TAU;
    let start_radius = rng.random::<f64>() * params.saccade_amplitude;
    let mut center = [start_radius * start_angle.cos(), start_radius * start_angle.sin()];
    let mut drift_dir = rng.random::<f64>() * TAU;

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        if rng.random::<f64>() < saccade_p {
            let len = params.saccade_amplitude * (0.5 + rng.random::<f64>());
            let dir = rng.random::<f64>() * TAU;
            let mut next = [center[0] + len * dir.cos(), center[1] + len * dir.sin()];
            if next[0].hypot(next[1]) > bound {
                next = [center[0] - len * dir.cos(), center[1] - len * dir.sin()];
            }
            center = next;
            drift_dir = rng.random::<f64>() * TAU;
        } else {
            center[0] += params.drift_velocity * dt * drift_dir.cos();
            center[1] += params.drift_velocity * dt * drift_dir.sin();
            if center[0].hypot(center[1]) > bound {
                drift_dir += std::f64::consts::PI;
            }
        }
        let mut coords = [0.0; 6];
        for (eye, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let x = center[0] + jitter.sample(&mut rng);
            let y = center[1] + jitter.sample(&mut rng);
            let norm = (x * x + y * y + 1.0).sqrt();
            coords[eye * 3] = x / norm + sign * half_offset;
            coords[eye * 3 + 1] = y / norm;
            coords[eye * 3 + 2] = 1.0 / norm;
        }
        let t_ms = i as f64 * 1000.0 / rate_hz;
        samples.push(GazeSample::new(t_ms, coords));
    }
    Ok(Recording {
        meta,
        samples,
        nominal_rate_hz: rate_hz,
    })
}

/// Perturbs each behavioral field by a factor `1 + drift_magnitude·u`,
/// `u ~ U[-1, 1]` drawn per field, clamping at zero. The seed field is kept.
pub fn apply_behavioral_drift(
    params: &SyntheticUserParams,
    drift_magnitude: f64,
    seed: u64,
) -> Result<SyntheticUserParams, GazeIoError> {
    if !(drift_magnitude >= 0.0 && drift_magnitude.is_finite()) {
        return Err(GazeIoError::InvalidParameter(format!(
            "drift magnitude {drift_magnitude} must be a non-negative number"
        )));
    }
    let mut out = *params;
    if drift_magnitude == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, &[]);
    for field in out.behavioral_fields_mut() {
        let u: f64 = rng.random_range(-1.0..=1.0);
        *field = (*field * (1.0 + drift_magnitude * u)).max(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze_io::Source;
    use proptest::prelude::*;

    fn params(seed: u64) -> SyntheticUserParams {
        SyntheticUserParams {
            saccade_rate_hz: 2.0,
            saccade_amplitude: 0.1,
            fixation_noise_sigma: 0.003,
            drift_velocity: 0.02,
            vergence_offset: 0.05,
            seed,
        }
    }

    fn meta() -> RecordingMeta {
        RecordingMeta::new("001", 1, 1, TaskKind::RandomSaccade, Source::Synthetic).unwrap()
    }

    #[test]
    fn five_seconds_at_250_hz_is_1250_samples() {
        let rec = generate_synthetic_recording(&params(1), meta(), 5.0, 250.0).unwrap();
        assert_eq!(rec.samples.len(), 1250);
        assert_eq!(rec.samples[1].t_ms, 4.0);
        assert_eq!(rec.samples[1249].t_ms, 1249.0 * 4.0);
        assert!(rec.samples.iter().all(|s| s.valid));
    }

    #[test]
    fn degenerate_process_holds_direction() {
        let p = SyntheticUserParams {
            saccade_rate_hz: 0.0,
            fixation_noise_sigma: 0.0,
            drift_velocity: 0.0,
            ..params(3)
        };
        let rec = generate_synthetic_recording(&p, meta(), 2.0, 250.0).unwrap();
        let first = rec.samples[0].coords;
        assert!(rec.samples.iter().all(|s| s.coords == first));
    }

    #[test]
    fn same_seed_is_bit_identical_and_sessions_differ() {
        let a = generate_synthetic_recording(&params(9), meta(), 3.0, 250.0).unwrap();
        let b = generate_synthetic_recording(&params(9), meta(), 3.0, 250.0).unwrap();
        assert_eq!(a, b);
        let mut m2 = meta();
        m2.session = 2;
        let c = generate_synthetic_recording(&params(9), m2, 3.0, 250.0).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn invalid_duration_rejected() {
        assert!(generate_synthetic_recording(&params(1), meta(), 0.0, 250.0).is_err());
    }

    #[test]
    fn zero_drift_is_identity() {
        assert_eq!(apply_behavioral_drift(&params(4), 0.0, 99).unwrap(), params(4));
    }

    #[test]
    fn drift_is_deterministic() {
        let a = apply_behavioral_drift(&params(4), 0.5, 17).unwrap();
        let b = apply_behavioral_drift(&params(4), 0.5, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, params(4));
        assert!(apply_behavioral_drift(&params(4), -0.1, 17).is_err());
    }

    /// Mean displacement between consecutive left-eye samples.
    fn mean_step(rec: &Recording) -> f64 {
        let s = &rec.samples;
        s.windows(2)
            .map(|w| ((w[1].coords[0] - w[0].coords[0]).powi(2) + (w[1].coords[1] - w[0].coords[1]).powi(2)).sqrt())
            .sum::<f64>()
            / (s.len() - 1) as f64
    }

    #[test]
    fn separated_users_distinguishable_by_nearest_centroid() {
        // Four users whose jitter and saccade rate differ by at least 2x.
        let users: Vec<SyntheticUserParams> = (0..4)
            .map(|u| SyntheticUserParams {
                saccade_rate_hz: 0.5 * 2f64.powi(u),
                fixation_noise_sigma: 0.001 * 2f64.powi(u),
                ..params(100 + u as u64)
            })
            .collect();
        let feature = |u: usize, session: u8| {
            let mut m = meta();
            m.session = session;
            mean_step(&generate_synthetic_recording(&users[u], m, 4.0, 250.0).unwrap())
        };
        let centroids: Vec<f64> = (0..4).map(|u| feature(u, 1)).collect();
        let mut correct = 0;
        for u in 0..4 {
            let f = feature(u, 2);
            let guess = (0..4)
                .min_by(|&a, &b| (centroids[a] - f).abs().total_cmp(&(centroids[b] - f).abs()))
                .unwrap();
            correct += usize::from(guess == u);
        }
        assert!(correct > 1, "nearest centroid got {correct}/4");
    }

    proptest! {
        #[test]
        fn sample_count_is_floor_of_duration_times_rate(duration in 0.01f64..3.0, rate in 10.0f64..300.0) {
            let rec = generate_synthetic_recording(&params(5), meta(), duration, rate).unwrap();
            prop_assert_eq!(rec.samples.len(), (duration * rate).floor() as usize);
        }

        #[test]
        fn drift_keeps_magnitudes_non_negative(m in 0.0f64..5.0, seed in any::<u64>()) {
            let mut out = apply_behavioral_drift(&params(1), m, seed).unwrap();
            prop_assert!(out.behavioral_fields_mut().iter().all(|v| **v >= 0.0));
        }
    }
}

//! Synthetic longitudinal cohorts: rounds 1 and 3, two sessions each.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::gaze_io::{
    apply_behavioral_drift, generate_synthetic_recording, Recording, RecordingMeta, Source, SyntheticUserParams, TaskKind,
};
use crate::seed::{derive_seed, label_hash, rng_for};

/// Rounds a synthetic cohort contains.
pub const COHORT_ROUNDS: [u8; 2] = [1, 3];
pub const COHORT_SESSIONS: [u8; 2] = [1, 2];

/// Log-uniform range `[low, high]` that one behavioral parameter is spread over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub low: f64,
    pub high: f64,
}

impl ParamRange {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    /// Geometric interpolation at `fraction ∈ [0, 1]`.
    fn at(&self, fraction: f64) -> f64 {
        self.low * (self.high / self.low).powf(fraction)
    }
}

/// Ranges the cohort's users are stratified over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserParamRanges {
    pub saccade_rate_hz: ParamRange,
    pub saccade_amplitude: ParamRange,
    pub fixation_noise_sigma: ParamRange,
    pub drift_velocity: ParamRange,
    pub vergence_offset: ParamRange,
}

/// Defaults keep the gaze center nearly still (tiny saccades and drift), so
/// users differ mainly in vergence offset and jitter, each spread over a
/// range narrow enough that a drift of 0.8 typically moves a user past its
/// neighbors.
impl Default for UserParamRanges {
    fn default() -> Self {
        Self {
            saccade_rate_hz: ParamRange::new(0.5, 5.0),
            saccade_amplitude: ParamRange::new(0.000_05, 0.000_5),
            fixation_noise_sigma: ParamRange::new(0.000_02, 0.000_5),
            drift_velocity: ParamRange::new(0.000_02, 0.000_2),
            vergence_offset: ParamRange::new(0.1, 0.4),
        }
    }
}

impl UserParamRanges {
    fn validate(&self) -> Result<(), ExperimentError> {
        let ranges = [
            self.saccade_rate_hz,
            self.saccade_amplitude,
            self.fixation_noise_sigma,
            self.drift_velocity,
            self.vergence_offset,
        ];
        if ranges.iter().all(|r| r.low > 0.0 && r.high >= r.low && r.high.is_finite()) {
            Ok(())
        } else {
            Err(ExperimentError::InvalidConfig(format!("parameter ranges must be positive and ordered: {self:?}")))
        }
    }
}

/// Everything needed to regenerate a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_users: usize,
    pub tasks: Vec<TaskKind>,
    pub drift_magnitude: f64,
    pub seed: u64,
    /// Length of every recording.
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub ranges: UserParamRanges,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_users: 8,
            tasks: TaskKind::ALL.to_vec(),
            drift_magnitude: 0.8,
            seed: 0,
            duration_s: 10.0,
            sample_rate_hz: 250.0,
            ranges: UserParamRanges::default(),
        }
    }
}

/// One synthetic subject: the round-1 generator and its drifted round-3 version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortUser {
    pub subject_id: String,
    pub base: SyntheticUserParams,
    pub drifted: SyntheticUserParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub users: Vec<CohortUser>,
    /// Ordered by subject, round, session, task.
    pub recordings: Vec<Recording>,
}

/// Zero-padded subject id, `"001"` for the first user.
pub fn subject_id(index: usize) -> String {
    format!("{:03}", index + 1)
}

/// Latin-hypercube draw of per-user parameters.
///
/// Each parameter range is cut into `n_users` log-spaced strata and every
/// user takes the center of a different stratum; the assignment of strata to
/// users is an independent seeded permutation per parameter.
pub fn cohort_user_params(spec: &CohortSpec) -> Result<Vec<SyntheticUserParams>, ExperimentError> {
    spec.ranges.validate()?;
    let n = spec.n_users;
    let r = &spec.ranges;
    let fields = [
        r.saccade_rate_hz,
        r.saccade_amplitude,
        r.fixation_noise_sigma,
        r.drift_velocity,
        r.vergence_offset,
    ];
    let levels: Vec<Vec<f64>> = fields
        .iter()
        .enumerate()
        .map(|(f, range)| {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng_for(spec.seed, &[0x1a7e, f as u64]));
            strata.iter().map(|&s| range.at((s as f64 + 0.5) / n as f64)).collect()
        })
        .collect();
    Ok((0..n)
        .map(|u| SyntheticUserParams {
            saccade_rate_hz: levels[0][u],
            saccade_amplitude: levels[1][u],
            fixation_noise_sigma: levels[2][u],
            drift_velocity: levels[3][u],
            vergence_offset: levels[4][u],
            seed: derive_seed(spec.seed, &[u as u64]),
        })
        .collect())
}

/// Generates the cohort described by `spec`.
///
/// Round 1 uses each user's base parameters; round 3 uses
/// `apply_behavioral_drift(base, drift_magnitude)` with a per-user seed.
pub fn make_cohort(spec: &CohortSpec) -> Result<Cohort, ExperimentError> {
    if spec.n_users < 2 {
        return Err(ExperimentError::InvalidConfig(format!("a cohort needs at least 2 users, got {}", spec.n_users)));
    }
    if spec.tasks.is_empty() {
        return Err(ExperimentError::InvalidConfig("a cohort needs at least one task".into()));
    }
    let mut tasks = spec.tasks.clone();
    tasks.sort();
    tasks.dedup();
    let mut users = Vec::with_capacity(spec.n_users);
    let mut recordings = Vec::new();
    for (u, base) in cohort_user_params(spec)?.into_iter().enumerate() {
        let id = subject_id(u);
        let drifted = apply_behavioral_drift(&base, spec.drift_magnitude, derive_seed(spec.seed, &[label_hash(&id), 3]))?;
        for round in COHORT_ROUNDS {
            let params = if round == 1 { &base } else { &drifted };
            for session in COHORT_SESSIONS {
                for &task in &tasks {
                    let meta = RecordingMeta::new(&id, round, session, task, Source::Synthetic)?;
                    recordings.push(generate_synthetic_recording(params, meta, spec.duration_s, spec.sample_rate_hz)?);
                }
            }
        }
        users.push(CohortUser {
            subject_id: id,
            base,
            drifted,
        });
    }
    Ok(Cohort {
        spec: CohortSpec {
            tasks,
            ..spec.clone()
        },
        users,
        recordings,
    })
}

/// [`make_cohort`] with default recording length, rate and parameter ranges.
pub fn make_longitudinal_cohort(
    n_users: usize,
    tasks: &[TaskKind],
    drift_magnitude: f64,
    seed: u64,
) -> Result<Cohort, ExperimentError> {
    make_cohort(&CohortSpec {
        n_users,
        tasks: tasks.to_vec(),
        drift_magnitude,
        seed,
        ..Default::default()
    })
}

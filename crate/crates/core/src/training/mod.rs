//! Train/test splitting, label encoding, the mini-batch loop shared by the
//! neural classifiers, and accuracy evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{argmax, AdamConfig, AdamState, Tape};
use crate::gaze_io::TaskKind;
use crate::model::{ModelError, NeuralClassifier};
use crate::preprocess::WindowSet;
use crate::seed::{label_hash, rng_for};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("subject {0} has fewer than two split units")]
    InsufficientData(String),
    #[error("label index {label} out of range for a {classes}-class model")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("subject {0} is not known to the label encoder")]
    UnknownLabel(String),
    #[error("no windows to evaluate")]
    EmptyWindowSet,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    /// Individual windows are assigned to train or test.
    #[default]
    Window,
    /// All windows of one (round, session) recording go to the same side.
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub unit: SplitUnit,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            unit: SplitUnit::Window,
            seed: 0,
        }
    }
}

/// Stratified per-subject split.
///
/// Each subject's units are shuffled with a seed derived from `spec.seed` and
/// the subject id; the first `ceil(train_fraction · n)` go to training, capped
/// at `n − 1` so every subject keeps at least one test unit. Both outputs keep
/// the original window order.
pub fn split(windows: &WindowSet, spec: &SplitSpec) -> Result<(WindowSet, WindowSet), TrainingError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(TrainingError::InvalidConfig(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut units: BTreeMap<&str, BTreeMap<(u8, u8, usize), Vec<usize>>> = BTreeMap::new();
    for (i, (label, prov)) in windows.labels().iter().zip(windows.provenance()).enumerate() {
        let key = match spec.unit {
            SplitUnit::Window => (0, 0, i),
            SplitUnit::Session => (prov.round, prov.session, 0),
        };
        units.entry(label).or_default().entry(key).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (subject, groups) in units {
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        let n = groups.len();
        if n < 2 {
            return Err(TrainingError::InsufficientData(subject.to_string()));
        }
        groups.shuffle(&mut rng_for(spec.seed, &[label_hash(subject)]));
        let n_train = ((spec.train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        for (k, g) in groups.into_iter().enumerate() {
            if k < n_train {
                train.extend(g);
            } else {
                test.extend(g);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((windows.subset(&train), windows.subset(&test)))
}

/// Subject ids sorted ascending, mapped to `0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEncoder {
    classes: Vec<String>,
}

impl LabelEncoder {
    pub fn fit<S: AsRef<str>>(ids: &[S]) -> Self {
        let mut classes: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
        classes.sort();
        classes.dedup();
        Self { classes }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn encode(&self, id: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(id)).ok()
    }

    pub fn decode(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    pub fn encode_all<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>, TrainingError> {
        ids.iter()
            .map(|id| self.encode(id.as_ref()).ok_or_else(|| TrainingError::UnknownLabel(id.as_ref().to_string())))
            .collect()
    }
}

/// Stable mapping of subject ids to contiguous class indices.
pub fn encode_labels<S: AsRef<str>>(ids: &[S]) -> (Vec<usize>, LabelEncoder) {
    let encoder = LabelEncoder::fit(ids);
    let encoded = encoder.encode_all(ids).expect("every id was fitted");
    (encoded, encoder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 64-bit floats throughout; the only supported mode.
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.001,
            shuffle_seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainingError::InvalidConfig(
                "batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 over the given documents, each length-prefixed.
pub fn fingerprint<S: AsRef<str>>(documents: &[S]) -> String {
    let mut hasher = Sha256::new();
    for d in documents {
        let bytes = d.as_ref().as_bytes();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    pub wall_clock_s: f64,
    pub fingerprint: String,
}

/// Equality ignores the wall-clock time, the only non-reproducible field.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epoch_losses == other.epoch_losses
            && self.final_train_accuracy == other.final_train_accuracy
            && self.fingerprint == other.fingerprint
    }
}

/// Mini-batch Adam on the mean cross-entropy.
///
/// Each epoch visits the windows in a seeded random order. Every window is
/// differentiated on its own tape with its own seeded dropout stream; the
/// gradients of a batch are summed in batch order and divided by the batch
/// size. The last batch may be smaller.
pub fn train_epochs<M: NeuralClassifier + ?Sized>(
    model: &mut M,
    train: &WindowSet,
    encoder: &LabelEncoder,
    config: &TrainConfig,
) -> Result<TrainReport, TrainingError> {
    config.validate()?;
    let started = Instant::now();
    let targets = encoder.encode_all(train.labels())?;
    let classes = model.n_classes();
    if let Some(&label) = targets.iter().find(|&&t| t >= classes) {
        return Err(TrainingError::LabelOutOfRange { label, classes });
    }
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: config.learning_rate,
            ..Default::default()
        },
    );
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.shuffle_seed, &[epoch as u64]));
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for (k, &i) in batch.iter().enumerate() {
                let mut dropout = rng_for(config.shuffle_seed, &[epoch as u64, b as u64, k as u64, 1]);
                let (loss, grads) = {
                    let mut tape = Tape::new(model.params());
                    let logits = model.logits(&mut tape, &train.window_array(i), Some(&mut dropout))?;
                    let loss = tape.cross_entropy(logits, &[targets[i]]).map_err(ModelError::from)?;
                    (tape.value(loss).data()[0], tape.backward(loss).map_err(ModelError::from)?)
                };
                total += loss;
                model.params_mut().accumulate(&grads, scale);
            }
            adam.step(model.params_mut());
        }
        epoch_losses.push(total / train.len().max(1) as f64);
    }
    if config.epochs > 0 {
        model.set_trained(true);
    }
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        correct += usize::from(argmax(&model.forward(&train.window_array(i))?) == t);
    }
    Ok(TrainReport {
        epoch_losses,
        final_train_accuracy: if targets.is_empty() { 0.0 } else { correct as f64 / targets.len() as f64 },
        wall_clock_s: started.elapsed().as_secs_f64(),
        fingerprint: fingerprint(&[
            model.architecture().to_string(),
            model.config_document(),
            serde_json::to_string(config).expect("config serializes"),
            serde_json::to_string(encoder).expect("encoder serializes"),
            train.len().to_string(),
        ]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per provenance task.
    pub per_task: BTreeMap<TaskKind, (usize, usize)>,
    /// Predicted subject id per window.
    pub predictions: Vec<String>,
}

impl Evaluation {
    pub fn task_accuracy(&self, task: TaskKind) -> Option<f64> {
        self.per_task.get(&task).map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Scores per-window class predictions against the window labels.
/// Windows of subjects unknown to `encoder` can only be counted wrong.
pub fn evaluate_with<F>(test: &WindowSet, encoder: &LabelEncoder, mut predict: F) -> Result<Evaluation, TrainingError>
where
    F: FnMut(usize) -> Result<usize, TrainingError>,
{
    if test.is_empty() {
        return Err(TrainingError::EmptyWindowSet);
    }
    let mut per_task: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(test.len());
    let mut correct = 0;
    for (i, (label, prov)) in test.labels().iter().zip(test.provenance()).enumerate() {
        let class = predict(i)?;
        let predicted = encoder.decode(class).unwrap_or_default().to_string();
        let hit = predicted == *label;
        correct += usize::from(hit);
        let entry = per_task.entry(prov.task).or_default();
        entry.0 += usize::from(hit);
        entry.1 += 1;
        predictions.push(predicted);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        correct,
        total: test.len(),
        per_task,
        predictions,
    })
}

/// Evaluation-mode arg-max accuracy of a neural classifier.
pub fn evaluate<M: NeuralClassifier + ?Sized>(
    model: &M,
    test: &WindowSet,
    encoder: &LabelEncoder,
) -> Result<Evaluation, TrainingError> {
    if !model.is_trained() {
        return Err(ModelError::UntrainedModel.into());
    }
    evaluate_with(test, encoder, |i| Ok(argmax(&model.forward(&test.window_array(i))?)))
}

/// Most frequent class; ties go to the lowest index.
pub fn majority_vote(predictions: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in predictions {
        *counts.entry(p).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(k, _)| k)
}

#[cfg(test)]
mod tests;

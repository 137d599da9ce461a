//! Neural window classifiers built on the autodiff tape.

mod densenet;
mod transformer;

pub use densenet::{receptive_field, DenseNetConfig, DenseNetModel};
pub use transformer::{attention, positional_encoding, TransformerConfig, TransformerModel};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Array, Checkpoint, ParamStore, Rng, Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input of shape {got:?} does not match the configured {expected}")]
    ShapeMismatch { expected: String, got: Vec<usize> },
    #[error("model has no trained parameters")]
    UntrainedModel,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Arg-max class (ties to the lowest index) and the softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probabilities = logits.to_vec();
        softmax_in_place(&mut probabilities);
        Self {
            class: crate::autodiff::argmax(logits),
            probabilities,
        }
    }
}

/// A differentiable `C×T → N` classifier.
pub trait NeuralClassifier {
    fn architecture(&self) -> &'static str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn n_classes(&self) -> usize;
    fn input_channels(&self) -> usize;
    fn is_trained(&self) -> bool;
    fn set_trained(&mut self, trained: bool);
    /// Architecture configuration as canonical JSON.
    fn config_document(&self) -> String;

    /// Records the forward pass for one `C×T` window, returning `1×N` logits.
    /// `rng = Some` enables dropout (training mode).
    fn logits<'p>(&'p self, tape: &mut Tape<'p>, window: &Array, rng: Option<&mut Rng>) -> Result<Var, ModelError>;

    /// Evaluation-mode logits. Works on untrained parameters.
    fn forward(&self, window: &Array) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(self.params());
        let out = self.logits(&mut tape, window, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn forward_batch(&self, windows: &[Array]) -> Result<Vec<Vec<f64>>, ModelError> {
        windows.iter().map(|w| self.forward(w)).collect()
    }

    fn predict(&self, window: &Array) -> Result<Prediction, ModelError> {
        if !self.is_trained() {
            return Err(ModelError::UntrainedModel);
        }
        Ok(Prediction::from_logits(&self.forward(window)?))
    }
}

pub(crate) fn check_window(window: &Array, channels: usize, len: Option<usize>) -> Result<(usize, usize), ModelError> {
    let got = window.shape().to_vec();
    let ok = matches!(got.as_slice(), [c, t] if *c == channels && len.is_none_or(|l| l == *t) && *t > 0);
    if !ok {
        let expected = match len {
            Some(l) => format!("{channels}x{l}"),
            None => format!("{channels}xT"),
        };
        return Err(ModelError::ShapeMismatch { expected, got });
    }
    Ok((got[0], got[1]))
}

/// Serialized model: architecture tag, configuration and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument<C> {
    pub architecture: String,
    pub config: C,
    pub trained: bool,
    pub weights: Checkpoint,
}

pub(crate) fn document_to_text<C: Serialize>(doc: &ModelDocument<C>) -> String {
    serde_json::to_string(doc).expect("model document serializes")
}

pub(crate) fn document_from_text<C: DeserializeOwned>(text: &str, architecture: &str) -> Result<ModelDocument<C>, ModelError> {
    let doc: ModelDocument<C> = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if doc.architecture != architecture {
        return Err(ModelError::Checkpoint(format!(
            "expected a {architecture} checkpoint, found {}",
            doc.architecture
        )));
    }
    Ok(doc)
}

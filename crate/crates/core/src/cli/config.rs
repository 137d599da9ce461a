use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::experiments::{CohortSpec, ExperimentConfig, ModelKind, Protocol};
use crate::gaze_io::TaskSelection;
use crate::gbt::GbtConfig;
use crate::model::{DenseNetConfig, TransformerConfig};
use crate::preprocess::{NormalizationScope, WindowConfig};
use crate::training::{SplitSpec, TrainConfig};

/// Every tunable of a run, loadable from TOML.
///
/// Resolution order: command-line flags, then the `--config` file, then
/// these defaults. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root for `experiment`, `train` and `eval`.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub protocols: Vec<Protocol>,
    /// Synthetic cohort written by `synth`.
    pub cohort: CohortSpec,
    pub models: Vec<ModelKind>,
    pub tasks: Vec<TaskSelection>,
    pub window: WindowConfig,
    pub normalization: NormalizationScope,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub transformer: TransformerConfig,
    pub densenet: DenseNetConfig,
    pub gbt: GbtConfig,
    pub retrained_test_session: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        let experiment = ExperimentConfig::default();
        Self {
            seed: experiment.seed,
            data: None,
            out: None,
            protocols: Protocol::ALL.to_vec(),
            cohort: CohortSpec::default(),
            models: experiment.models,
            tasks: experiment.tasks,
            window: experiment.window,
            normalization: experiment.normalization,
            split: experiment.split,
            train: experiment.train,
            transformer: experiment.transformer,
            densenet: experiment.densenet,
            gbt: experiment.gbt,
            retrained_test_session: experiment.retrained_test_session,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            models: self.models.clone(),
            tasks: self.tasks.clone(),
            window: self.window,
            normalization: self.normalization,
            split: self.split,
            train: self.train,
            transformer: self.transformer,
            densenet: self.densenet.clone(),
            gbt: self.gbt,
            retrained_test_session: self.retrained_test_session,
        }
    }
}

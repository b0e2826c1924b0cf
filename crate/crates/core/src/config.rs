//! Experiment configuration: one TOML document with data, edm, prompt_net, backend, loss,
//! train and eval sections. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{ingest_manifest, phantom_inventory, read_manifest, PhantomConfig, VolumeRecord};
use crate::edm::{EdgeModule, EdgeParams, SmoothingParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::Aggregation;
use crate::pipeline::PipelineKind;
use crate::prompt_net::PromptNetConfig;
use crate::raster::Modality;
use crate::segmenter::BackendConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated phantom volumes; needs no files.
    Phantom,
    /// Volumes listed in a manifest produced by `scan`.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub manifest: Option<PathBuf>,
    /// MR sequence used wherever MR volumes enter a protocol.
    pub mr_sequence: Modality,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            manifest: None,
            mr_sequence: Modality::MrT1Oop,
            phantom: PhantomConfig::default(),
        }
    }
}

impl DataConfig {
    /// Materializes every volume of the configured source, keeping CT and the selected MR sequence.
    pub fn load(&self) -> Result<Vec<VolumeRecord>> {
        match self.source {
            DataSource::Phantom => phantom_inventory(&self.phantom),
            DataSource::Manifest => {
                let path = self
                    .manifest
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source = \"manifest\" needs data.manifest".into()))?;
                let entries: Vec<_> = read_manifest(path)?
                    .into_iter()
                    .filter(|e| e.modality == Modality::Ct || e.modality == self.mr_sequence)
                    .collect();
                ingest_manifest(&entries)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmConfig {
    pub smoothing: SmoothingParams,
    pub edges: EdgeParams,
}

impl EdmConfig {
    pub fn module(&self) -> Result<EdgeModule> {
        EdgeModule::new(self.smoothing, self.edges)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pipeline: PipelineKind,
    pub epochs: usize,
    /// Epochs without a validation-Dice improvement before stopping.
    pub patience: usize,
    /// Constant Adam step size.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between checks that the backend parameters are unchanged.
    pub frozen_check_interval: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once validation Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineKind::Edge2Prompt,
            epochs: 250,
            patience: 50,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            frozen_check_interval: 25,
            max_steps: None,
            target_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::Config(format!(
                "train.patience must be in 1..={}, got {}",
                self.epochs, self.patience
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("train.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.frozen_check_interval == 0 {
            return Err(Error::Config("train.frozen_check_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::PerVolume,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub edm: EdmConfig,
    pub prompt_net: PromptNetConfig,
    pub backend: BackendConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.edm.edges.validate()?;
        self.prompt_net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Tiny prompt network for CPU runs on phantoms.
    pub fn tiny() -> Self {
        Self {
            prompt_net: PromptNetConfig::tiny(),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepochz = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[train]\nepochs = 5\npatience = 2\n").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.loss, LossConfig::default());
    }

    #[test]
    fn patience_beyond_epochs_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepochs = 5\npatience = 6\n").is_err());
    }
}

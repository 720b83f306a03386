//! JSON run configuration shared by the CLI and the experiments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_data, Dataset, GenConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Dataset source: JSON-lines files when both paths are set, otherwise
/// generated in memory from the remaining fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub cluster_std: f64,
    pub seed: u64,
    pub min_angle_deg: f64,
    pub samples: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        DataConfig {
            classes: g.classes,
            per_class: g.per_class,
            cluster_std: g.cluster_std,
            seed: g.seed,
            min_angle_deg: g.min_angle_deg,
            samples: None,
            prototypes: None,
        }
    }
}

impl DataConfig {
    pub fn gen_config(&self, input_dim: usize) -> GenConfig {
        GenConfig {
            classes: self.classes,
            per_class: self.per_class,
            input_dim,
            cluster_std: self.cluster_std,
            seed: self.seed,
            min_angle_deg: self.min_angle_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Samples averaged over by the layer-similarity analysis.
    pub samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Fine-adapter layer ranks for the rank sweep.
    pub layer_ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 0.1, 0.3, 0.5, 1.0],
            layer_ranks: vec![1, 2, 4, 8, 16],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.samples.is_some() != self.data.prototypes.is_some() {
            return Err(Error::Config(
                "data.samples and data.prototypes must be set together".into(),
            ));
        }
        if self.analysis.samples == 0 {
            return Err(Error::Config("analysis.samples must be >= 1".into()));
        }
        if self.sweep.lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(Error::Config("sweep lambdas must be >= 0".into()));
        }
        if self.sweep.layer_ranks.contains(&0) {
            return Err(Error::Config("sweep layer ranks must be >= 1".into()));
        }
        Ok(())
    }

    /// Reseeds everything that varies between repeated runs: data
    /// generation, adapter initialization and shuffling. Backbones stay.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.adapter_seed = seed;
        self.train.shuffle_seed = seed;
        self
    }

    /// Reads the configured dataset files, or generates the dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.samples, &self.data.prototypes) {
            (Some(s), Some(p)) => Dataset::read(s, p),
            _ => gen_data(&self.data.gen_config(self.model.input_dim)),
        }
    }
}

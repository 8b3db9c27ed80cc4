//! JSON pipeline configuration shared by the CLI and experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookSpec;
use crate::error::{io_err, Error, Result};
use crate::evaluation::DEFAULT_TRIALS;
use crate::host::{load_idx, synth_dataset, DataSplit, HostArch, ImageShape};
use crate::marking::{EmbedConfig, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        samples_per_class: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            classes: 10,
            samples_per_class: 100,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostConfig {
    pub shape: ImageShape,
    pub arch: HostArch,
    pub dataset: DatasetConfig,
    pub baseline_epochs: usize,
    pub baseline_learning_rate: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            shape: ImageShape { side: 7, depth: 8 },
            arch: HostArch::default(),
            dataset: DatasetConfig::default(),
            baseline_epochs: 5,
            baseline_learning_rate: 0.05,
        }
    }
}

impl HostConfig {
    pub fn load_data(&self) -> Result<DataSplit> {
        let data = match &self.dataset {
            DatasetConfig::Synthetic { classes, samples_per_class, seed } => {
                synth_dataset(*seed, *classes, *samples_per_class, self.shape)?
            }
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => DataSplit {
                train: load_idx(train_images, train_labels)?,
                test: load_idx(test_images, test_labels)?,
            },
        };
        if data.train.shape.depth != self.arch.depth {
            return Err(Error::Config(format!(
                "input depth {} does not match marked-layer depth {}",
                data.train.shape.depth, self.arch.depth
            )));
        }
        Ok(data)
    }

    pub fn classes(&self) -> Result<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, .. } => Ok(*classes),
            DatasetConfig::Idx { .. } => Ok(self.load_data()?.train.classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub tau: f64,
    pub k_cap: Option<usize>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, k_cap: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub trials: usize,
    /// Inclusive colluder-count range.
    #[serde(rename = "K_range")]
    pub k_range: (usize, usize),
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            k_range: (1, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub codebook: CodebookSpec,
    pub host: HostConfig,
    pub embed: EmbedConfig,
    pub detect: DetectConfig,
    pub simulate: SimulateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            codebook: CodebookSpec::Projective { p: 5 },
            host: HostConfig::default(),
            embed: EmbedConfig::default(),
            detect: DetectConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

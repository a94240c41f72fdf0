use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bgdb_core::block::{BgdbConfig, Task, TaskLoss};
use bgdb_core::nets::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::optim::OptimizerConfig;

fn default_log_every() -> usize {
    50
}

fn default_test_fraction() -> f64 {
    0.25
}

/// k-fold split: fold `fold` (0-based) is held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub k: usize,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: DatasetConfig,
    pub model: BackboneConfig,
    #[serde(default)]
    pub bgdb: Option<BgdbConfig>,
    /// Defaults to Dice for segmentation and cross-entropy for classification.
    #[serde(default)]
    pub task_loss: Option<TaskLoss>,
    pub optimizer: OptimizerConfig,
    /// Joint L2 bound on each step's gradients; unbounded when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Fills the `wall_time` column; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub cross_validation: Option<CrossValidation>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            bail!("iterations, batch_size and log_every must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test_fraction {} must lie in (0, 1)", self.test_fraction);
        }
        if let Some(cv) = self.cross_validation {
            if cv.k < 2 || cv.fold >= cv.k {
                bail!("cross validation needs k >= 2 and fold < k, got {cv:?}");
            }
        }
        match (self.task, &self.model) {
            (Task::Segmentation, BackboneConfig::Segmentation(_)) | (Task::Classification, BackboneConfig::Classifier(_)) => {}
            (task, _) => bail!("model kind does not fit task {task:?}"),
        }
        if let Some(b) = &self.bgdb {
            b.validate()?;
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                bail!("grad_clip {c} must be positive");
            }
        }
        self.optimizer.validate()?;
        self.dataset.validate()?;
        Ok(())
    }

    pub fn task_loss(&self) -> TaskLoss {
        self.task_loss.unwrap_or(match self.task {
            Task::Segmentation => TaskLoss::Dice,
            Task::Classification => TaskLoss::CrossEntropy,
        })
    }
}

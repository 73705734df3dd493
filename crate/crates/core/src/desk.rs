//! The scaled-down experiment: a synthetic four-class 28x28 dataset, a
//! small CNN as the black box, and a three-stage autoencoder grown 7 -> 14 -> 28.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{stages_dir, ModelBundle};
use crate::classifier::{train_classifier, ClassifierConfig, TrainReport};
use crate::data::{synthetic_blobs, Dataset};
use crate::error::Result;
use crate::progressive::{stage_plan, train_progressive, MetricRecord, ProgressiveHyper, StageMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub images: usize,
    pub resolution: usize,
    pub base_resolution: usize,
    pub train_fraction: f64,
    pub data_seed: u64,
    pub classifier: ClassifierConfig,
    pub progressive: ProgressiveHyper,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            images: 2000,
            resolution: 28,
            base_resolution: 7,
            train_fraction: 0.8,
            data_seed: 2024,
            classifier: ClassifierConfig::default(),
            progressive: ProgressiveHyper::desk(),
        }
    }
}

impl DeskConfig {
    /// `(train, validation)` split of the synthetic dataset.
    pub fn dataset(&self) -> (Dataset, Dataset) {
        synthetic_blobs(self.images, self.resolution, self.data_seed).split(self.train_fraction, self.data_seed)
    }
}

#[derive(Clone, Debug)]
pub struct DeskRun {
    pub bundle: ModelBundle,
    pub classifier_report: TrainReport,
    pub stages: Vec<StageMetrics>,
    pub train: Dataset,
    pub val: Dataset,
}

/// Trains both models; with `dir` the bundle and per-stage checkpoints are saved there.
pub fn train_desk(cfg: &DeskConfig, dir: Option<&Path>, on_metric: &mut dyn FnMut(&MetricRecord)) -> Result<DeskRun> {
    let (train, val) = cfg.dataset();
    let (classifier, classifier_report) = train_classifier(&train, Some(&val), &cfg.classifier)?;
    let plan = stage_plan(cfg.base_resolution, cfg.resolution, &cfg.progressive)?;
    let stage_dir = dir.map(stages_dir);
    let (aae, stages) = train_progressive(&train, &plan, &cfg.progressive, stage_dir.as_deref(), on_metric)?;
    let bundle = ModelBundle::new(classifier, aae)?;
    if let Some(d) = dir {
        bundle.save(d)?;
    }
    Ok(DeskRun { bundle, classifier_report, stages, train, val })
}

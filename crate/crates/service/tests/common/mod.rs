#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use exemplar_core::aae::MbdConfig;
use exemplar_core::bundle::ModelBundle;
use exemplar_core::classifier::{train_classifier, ClassifierConfig};
use exemplar_core::data::synthetic_blobs;
use exemplar_core::image::Image;
use exemplar_core::progressive::{stage_plan, train_progressive, ProgressiveHyper};
use tempfile::TempDir;

pub const RES: usize = 8;

pub fn classifier_config() -> ClassifierConfig {
    ClassifierConfig { resolution: RES, filters: vec![8], epochs: 6, augment: None, ..ClassifierConfig::default() }
}

pub fn hyper() -> ProgressiveHyper {
    ProgressiveHyper {
        latent_dim: 8,
        filter_base: 8,
        filter_cap: 8,
        width_per_stage: 16,
        epochs: vec![40],
        eval_images: 32,
        diversity_samples: 16,
        mbd: MbdConfig { kernels: 4, dims: 3 },
        ..ProgressiveHyper::desk()
    }
}

/// A small model pair trained on 8x8 synthetic images, saved once per
/// test binary.
pub fn model_dir() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let data = synthetic_blobs(800, RES, 5);
        let (train, val) = data.split(0.8, 5);
        let (classifier, _) = train_classifier(&train, Some(&val), &classifier_config()).unwrap();
        let plan = stage_plan(RES, RES, &hyper()).unwrap();
        let (aae, _) = train_progressive(&train, &plan, &hyper(), None, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ModelBundle::new(classifier, aae).unwrap().save(dir.path()).unwrap();
        dir
    })
    .path()
}

/// Validation images of the fixture's dataset.
pub fn sample_images(n: usize) -> Vec<Image> {
    let (_, val) = synthetic_blobs(800, RES, 5).split(0.8, 5);
    val.images.into_iter().take(n).collect()
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name)
}

pub fn validate(schema: &str, instance: &serde_json::Value) -> Vec<String> {
    let text = std::fs::read_to_string(schema_path(schema)).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&text).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    v.iter_errors(instance).map(|e| format!("{}: {e}", e.instance_path)).collect()
}

use std::path::Path;

use exemplar_core::bundle::ModelBundle;
use exemplar_core::classifier::BlackBox;
use exemplar_core::image::Image;
use serde::Serialize;

use crate::error::Result;
use crate::store::ModelRef;

/// The loaded model pair; immutable once the service starts.
pub struct Registry {
    pub name: String,
    pub bundle: ModelBundle,
    pub classifier_id: String,
    pub aae_id: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub classifier_id: String,
    pub aae_id: String,
    pub resolution: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub stage_index: usize,
    pub class_codes: Vec<String>,
}

impl Registry {
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "default".into());
        Self::from_bundle(name, ModelBundle::load(dir)?)
    }

    pub fn from_bundle(name: String, bundle: ModelBundle) -> Result<Self> {
        let (classifier_id, aae_id) = bundle.ids()?;
        Ok(Self { name, bundle, classifier_id, aae_id })
    }

    pub fn model_ref(&self) -> ModelRef {
        ModelRef { name: self.name.clone(), classifier_id: self.classifier_id.clone(), aae_id: self.aae_id.clone() }
    }

    pub fn info(&self) -> ModelInfo {
        let (h, _, c) = self.bundle.classifier.input_dims();
        ModelInfo {
            name: self.name.clone(),
            classifier_id: self.classifier_id.clone(),
            aae_id: self.aae_id.clone(),
            resolution: h,
            channels: c,
            latent_dim: self.bundle.aae.latent_dim(),
            stage_index: self.bundle.aae.spec.stage_index,
            class_codes: self.bundle.classifier.class_codes().to_vec(),
        }
    }

    /// Brings an uploaded image to the models' input format.
    pub fn prepare(&self, img: &Image) -> Image {
        let (h, w, c) = self.bundle.classifier.input_dims();
        let img = if c == 3 { img.to_rgb() } else { img.clone() };
        img.resize(h, w)
    }
}

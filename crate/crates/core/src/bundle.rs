//! On-disk model directory: a trained classifier and autoencoder side by side.
//!
//! ```text
//! <dir>/classifier.safetensors
//! <dir>/aae.safetensors
//! <dir>/stages/aae_s{index}_r{resolution}.safetensors
//! ```

use std::path::{Path, PathBuf};

use crate::aae::AaeModel;
use crate::checkpoint::Checkpoint;
use crate::classifier::{BlackBox, CnnClassifier};
use crate::error::{Error, Result};

pub const CLASSIFIER_FILE: &str = "classifier.safetensors";
pub const AAE_FILE: &str = "aae.safetensors";
pub const STAGES_DIR: &str = "stages";

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub classifier: CnnClassifier,
    pub aae: AaeModel,
}

impl ModelBundle {
    /// Checks that the autoencoder produces what the classifier consumes.
    pub fn new(classifier: CnnClassifier, aae: AaeModel) -> Result<Self> {
        if classifier.input_dims() != aae.input_dims() {
            return Err(Error::Config(format!(
                "classifier takes {:?} images, autoencoder produces {:?}",
                classifier.input_dims(),
                aae.input_dims()
            )));
        }
        Ok(Self { classifier, aae })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.classifier.to_checkpoint()?.save(&dir.join(CLASSIFIER_FILE))?;
        self.aae.to_checkpoint()?.save(&dir.join(AAE_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let classifier = CnnClassifier::from_checkpoint(&Checkpoint::load(&dir.join(CLASSIFIER_FILE))?)?;
        let aae = AaeModel::from_checkpoint(&Checkpoint::load(&dir.join(AAE_FILE))?)?;
        Self::new(classifier, aae)
    }

    /// Short content hashes identifying the two checkpoints.
    pub fn ids(&self) -> Result<(String, String)> {
        use sha2::{Digest, Sha256};
        let short = |bytes: Vec<u8>| hex::encode(&Sha256::digest(bytes)[..8]);
        Ok((short(self.classifier.to_checkpoint()?.to_bytes()?), short(self.aae.to_checkpoint()?.to_bytes()?)))
    }
}

pub fn stages_dir(dir: &Path) -> PathBuf {
    dir.join(STAGES_DIR)
}

//! Layered settings: built-in defaults, then an optional TOML file, then
//! `EXEMPLAR_*` environment variables (`__` separates nested keys, e.g.
//! `EXEMPLAR_EXPLAIN__GENETIC__TAU=0.6`).

use std::path::{Path, PathBuf};

use exemplar_core::data::{load_manifest, Dataset};
use exemplar_core::desk::DeskConfig;
use exemplar_core::explainer::ExplainConfig;
use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const ENV_PREFIX: &str = "EXEMPLAR_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub model_dir: PathBuf,
    /// Sessions and image artifacts.
    pub store_dir: PathBuf,
    pub host: String,
    pub port: u16,
    pub data: DataSource,
    /// Dataset size, split, stage plan and training hyperparameters.
    pub desk: DeskConfig,
    pub explain: ExplainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from("models"),
            store_dir: PathBuf::from("sessions"),
            host: "127.0.0.1".into(),
            port: 8080,
            data: DataSource::default(),
            desk: DeskConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

/// Image files listed in a CSV manifest; the synthetic dataset when unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub manifest: Option<PathBuf>,
    pub images_dir: Option<PathBuf>,
}

impl Settings {
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut fig = Figment::from(Serialized::defaults(Settings::default()));
        if let Some(path) = file {
            if !path.is_file() {
                return Err(ServiceError::Usage(format!("config file {} not found", path.display())));
            }
            fig = fig.merge(Toml::file(path));
        }
        fig.merge(Env::prefixed(ENV_PREFIX).split("__"))
            .extract()
            .map_err(|e| ServiceError::Usage(format!("bad configuration: {e}")))
    }

    /// `(train, validation)` split at `resolution`.
    pub fn datasets(&self, resolution: usize) -> Result<(Dataset, Dataset)> {
        match &self.data.manifest {
            Some(manifest) => {
                let dir = self
                    .data
                    .images_dir
                    .clone()
                    .or_else(|| manifest.parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                let ds = load_manifest(&dir, manifest, Some(resolution))?;
                Ok(ds.split(self.desk.train_fraction, self.desk.data_seed))
            }
            None => {
                let desk = DeskConfig { resolution, ..self.desk.clone() };
                Ok(desk.dataset())
            }
        }
    }
}

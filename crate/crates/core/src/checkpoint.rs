//! Checkpoint container: named `f64` tensors plus a JSON metadata document,
//! stored in the safetensors layout.

use std::collections::HashMap;
use std::path::Path;

use exemplar_nn::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;
const META_KEY: &str = "meta";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Always carries `schema_version` and `kind`.
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut meta = Map::new();
        meta.insert("schema_version".into(), SCHEMA_VERSION.into());
        meta.insert("kind".into(), kind.into());
        Self { meta, tensors: Vec::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
        }
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        let meta: Map<String, Value> = serde_json::from_str(meta_json)?;
        match meta.get("schema_version").and_then(Value::as_u64) {
            Some(SCHEMA_VERSION) => {}
            other => return Err(Error::Checkpoint(format!("unsupported schema version {other:?}"))),
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("tensor {name} is {:?}, expected F64", view.dtype())));
            }
            let data =
                view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            tensors.push((name, Tensor::from_vec(view.shape(), data)?));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parses the `spec` metadata entry.
    pub fn spec<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        let v = self.meta.get("spec").ok_or_else(|| Error::Checkpoint("metadata has no spec".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn lookup(&self) -> impl Fn(&str) -> Option<Tensor> + '_ {
        move |name| self.get(name).cloned()
    }
}

//! Checkpoint container: named f32 tensors plus JSON metadata in a safetensors file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use dfq_autograd::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::params::ParamStore;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "dfq";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        c.meta.insert("kind".into(), kind.to_string());
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.put_tensor(format!("{prefix}parameters.{name}"), t.clone());
        }
    }

    pub fn load_params(&self, prefix: &str, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let src = self.tensor(&format!("{prefix}parameters.{name}"))?;
            if src.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
        }
        Ok(())
    }

    pub fn put_tensor_list(&mut self, prefix: &str, list: &[Tensor]) {
        for (i, t) in list.iter().enumerate() {
            self.put_tensor(format!("{prefix}.{i}"), t.clone());
        }
    }

    pub fn tensor_list(&self, prefix: &str, len: usize) -> Result<Vec<Tensor>> {
        (0..len).map(|i| self.tensor(&format!("{prefix}.{i}")).cloned()).collect()
    }

    pub fn put_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn put_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.put_meta(key, s);
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.meta(key)?).map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
    }

    /// Writes atomically (temp file + rename). Output bytes depend only on contents.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), raw, t.shape().to_vec())
            })
            .collect();
        let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let views = bytes
            .iter()
            .map(|(k, raw, shape)| Ok((k.as_str(), TensorView::new(Dtype::F32, shape.clone(), raw).map_err(err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta_json = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(META_KEY.to_string(), meta_json)]);
        let out = safetensors::serialize(views, &Some(meta)).map_err(err)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: not a checkpoint", path.display())))?;
        let meta: BTreeMap<String, String> =
            serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let version: u32 = meta
            .get("format_version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {version}")));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {name}: expected F32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(view.shape(), data)?);
        }
        Ok(Self { tensors, meta })
    }
}

//! Versioned checkpoint container.
//!
//! A checkpoint is a safetensors file. Tensors hold model weights, batch-norm
//! buffers and optimizer state; the string header carries:
//!
//! | key              | value                                      |
//! |------------------|--------------------------------------------|
//! | `format`         | `aop-checkpoint`                           |
//! | `format_version` | integer, currently `1`                     |
//! | `kind`           | `aop` or `classifier`                      |
//! | `epoch`          | last completed epoch (1-based, 0 = untrained) |
//! | `config_hash`    | hex digest of the producing configuration  |
//! | `meta.<key>`     | free-form JSON strings owned by each model |
//!
//! Readers ignore unknown header keys, so later versions may add fields.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "aop-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Aop,
    Classifier,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Aop => "aop",
            CheckpointKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key:?}")))?;
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad {key:?} entry: {e}")))
    }

    pub fn set_meta_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.meta.insert(key.to_owned(), serde_json::to_string(value)?);
        Ok(())
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let head = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|n| (n.to_owned(), v.clone())))
            .collect()
    }

    pub fn insert_section(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = HashMap::new();
        header.insert("format".to_owned(), FORMAT_NAME.to_owned());
        header.insert("format_version".to_owned(), FORMAT_VERSION.to_string());
        header.insert("kind".to_owned(), self.kind.as_str().to_owned());
        header.insert("epoch".to_owned(), self.epoch.to_string());
        header.insert("config_hash".to_owned(), self.config_hash.clone());
        for (k, v) in &self.meta {
            header.insert(format!("meta.{k}"), v.clone());
        }
        let tensors: Vec<(&String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k, v.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(tensors, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, metadata) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = metadata.metadata().clone().unwrap_or_default();
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header field {k:?} missing")))
        };
        if field("format")? != FORMAT_NAME {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version} is newer than supported {FORMAT_VERSION}")));
        }
        let kind = match field("kind")?.as_str() {
            "aop" => CheckpointKind::Aop,
            "classifier" => CheckpointKind::Classifier,
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        };
        let epoch = field("epoch")?.parse().map_err(|_| Error::Checkpoint("bad epoch".into()))?;
        let meta = header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|n| (n.to_owned(), v.clone())))
            .collect();
        let tensors = candle_core::safetensors::load_buffer(bytes, device)?.into_iter().collect();
        Ok(Self { kind, epoch, config_hash: field("config_hash")?, meta, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dev = Device::Cpu;
        let mut ck = Checkpoint {
            kind: CheckpointKind::Aop,
            epoch: 3,
            config_hash: "abc".into(),
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        };
        ck.set_meta_json("variant", &"SSIM").unwrap();
        ck.tensors.insert("w".into(), Tensor::new(&[[0.1f32, -2.5], [3.0, 1e-7]], &dev).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), &dev).unwrap();
        assert_eq!(back.kind, CheckpointKind::Aop);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.meta_json::<String>("variant").unwrap(), "SSIM");
        assert_eq!(
            back.tensors["w"].to_vec2::<f32>().unwrap(),
            ck.tensors["w"].to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn missing_file_is_named() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.ckpt"), &Device::Cpu).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert!(err.to_string().contains("x.ckpt"));
    }
}

//! Versioned binary container for model weights.
//!
//! Layout: the 8-byte magic `MAUCKPT\n`, a little-endian u32 format
//! version, a little-endian u64 header length, the JSON header, then every
//! tensor's f64 values in little-endian order. Tensors are stored in name
//! order, at the offsets the header records. The same container holds
//! pretrained encoder weights, with the run metadata left out.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::device;
use crate::task::AuTaskSpec;

pub const MAGIC: &[u8; 8] = b"MAUCKPT\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMeta {
    pub index: usize,
    pub held_out: String,
}

/// Position of the minibatch shuffler when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<AuTaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<FoldMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Option<Config>,
    pub task: Option<AuTaskSpec>,
    pub epoch: Option<usize>,
    pub fold: Option<FoldMeta>,
    pub rng: Option<RngState>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Checkpoint> {
        let tensors = tensors
            .iter()
            .map(|(k, t)| {
                let data = t.flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), StoredTensor { shape: t.dims().to_vec(), data }))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { tensors, ..Default::default() })
    }

    pub fn tensor_map(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .map(|(k, s)| Ok((k.clone(), Tensor::from_vec(s.data.clone(), s.shape.as_slice(), &device())?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(k, s)| {
                let e = TensorEntry { shape: s.shape.clone(), offset };
                offset += s.data.len();
                (k.clone(), e)
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            task: self.task.clone(),
            epoch: self.epoch,
            fold: self.fold.clone(),
            rng: self.rng.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in self.tensors.values() {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let data = &body[len..];
        if data.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut expected = 0;
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` lies outside the data section")));
            }
            expected += n;
            tensors.insert(name, StoredTensor { shape: e.shape, data: values[e.offset..e.offset + n].to_vec() });
        }
        if expected != values.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        Ok(Checkpoint { config: header.config, task: header.task, epoch: header.epoch, fold: header.fold, rng: header.rng, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Reads the tensors of a container file, ignoring its metadata.
pub fn read_tensor_file(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    Checkpoint::load(path)?.tensor_map()
}

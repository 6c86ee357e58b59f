//! Binary checkpoint files.
//!
//! Layout: the four bytes `SVAE`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f64` data of every tensor. The header records the
//! training configuration, model layout, metrics history and, per tensor,
//! its name, shape, byte offset (relative to the end of the header) and
//! byte length.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::autodiff::ParamSet;
use crate::error::{file_err, Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVAE";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub image_shape: (usize, usize),
    pub params: ParamSet,
    pub epoch: usize,
    pub metrics_history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    image_shape: (usize, usize),
    epoch: usize,
    metrics_history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Rebuilds the model described by this checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.config.model_kind, self.model.clone(), self.params.clone())
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.config.model_kind, self.model, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let length = 8 * t.len() as u64;
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            image_shape: self.image_shape,
            epoch: self.epoch,
            metrics_history: self.metrics_history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 {
            return Err(Error::CheckpointTruncated(format!("{} bytes, no magic", bytes.len())));
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::CheckpointTruncated(format!("{} bytes, preamble incomplete", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CheckpointTruncated(format!("header of {header_len} bytes runs past end of file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..blob_start])
            .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
        let blobs = &bytes[blob_start..];

        let mut params = ParamSet::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            if e.length != 8 * count as u64 || e.offset != expected_offset {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {:?}: offset {} length {} inconsistent with shape {:?}",
                    e.name, e.offset, e.length, e.shape
                )));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
            if end > blobs.len() {
                return Err(Error::CheckpointTruncated(format!(
                    "tensor {:?} needs bytes {start}..{end}, only {} present",
                    e.name,
                    blobs.len()
                )));
            }
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::CheckpointFormat(format!("tensor {:?}: {err}", e.name)))?;
            params
                .insert(e.name.clone(), t)
                .map_err(|err| Error::CheckpointFormat(err.to_string()))?;
            expected_offset += e.length;
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes after tensor data",
                blobs.len() - expected_offset as usize
            )));
        }
        let ck = Checkpoint {
            config: header.config,
            model: header.model,
            image_shape: header.image_shape,
            params,
            epoch: header.epoch,
            metrics_history: header.metrics_history,
        };
        ck.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(file_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(file_err(path))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

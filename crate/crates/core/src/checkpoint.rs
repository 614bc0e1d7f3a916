//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGCM"
//! 4       4     version, u32 little-endian (= 1)
//! 8       4     header length L, u32 little-endian
//! 12      L     JSON header (UTF-8, compact)
//! 12+L    4·P   parameters as f32 little-endian, in header order
//! ```
//!
//! The header carries the model configuration, class names, tap names, the
//! `(name, shape)` list of every parameter tensor and optional training
//! metadata. Serialization is deterministic, so save → load → save is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::model::{Model, UNetConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SGCM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub samples: usize,
    pub image_size: usize,
    pub final_loss: f64,
    pub final_pixel_accuracy: f64,
    pub final_mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    class_names: Vec<String>,
    tap_names: Vec<String>,
    params: Vec<ParamEntry>,
    training: Option<TrainingMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
    pub training: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.model.config().clone();
        let header = Header {
            class_names: self.class_names.clone(),
            tap_names: config.tap_names(),
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.dims().to_vec(),
                })
                .collect(),
            training: self.training.clone(),
            config,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.model.param_count());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let field = |range: std::ops::Range<usize>, what: &'static str| {
            bytes.get(range).ok_or(CheckpointError::Truncated(what))
        };
        let magic: [u8; 4] = field(0..4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(field(4..8, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let header_len =
            u32::from_le_bytes(field(8..12, "header length")?.try_into().expect("4 bytes")) as usize;
        let header_bytes = field(12..12 + header_len, "header")?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let expected: Vec<ParamEntry> = header
            .config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect();
        if header.params != expected {
            return Err(CheckpointError::ShapeMismatch(
                "parameter list does not match the configured architecture".into(),
            )
            .into());
        }
        if header.tap_names != header.config.tap_names() {
            return Err(CheckpointError::ShapeMismatch(
                "tap list does not match the configured architecture".into(),
            )
            .into());
        }
        if header.class_names.len() != header.config.num_classes {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{} class names for {} classes",
                header.class_names.len(),
                header.config.num_classes
            ))
            .into());
        }

        let payload = &bytes[12 + header_len..];
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * total {
            return Err(CheckpointError::PayloadLength {
                expected: 4 * total,
                actual: payload.len(),
            }
            .into());
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors = expected
            .iter()
            .map(|e| {
                let len = e.shape.iter().product();
                Tensor::new(&e.shape, floats.by_ref().take(len).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: Model::from_params(header.config, tensors)?,
            class_names: header.class_names,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

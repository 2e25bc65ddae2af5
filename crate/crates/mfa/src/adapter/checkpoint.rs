//! Named-tensor checkpoint files.
//!
//! A checkpoint is a JSON header line describing the tensor table plus a
//! concatenated f32 little-endian payload, written atomically. The format is
//! generic over tensor names so the trainer can store the adapter, the
//! identity head, and fine-tuned encoder projections in one file.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AdapterError;
use crate::binio;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "mfa-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: Value,
}

/// Writes `tensors` (in the given order) with an arbitrary JSON `meta`
/// blob. Values are quantized to f32; loading yields exactly the
/// quantized values, so save/load round-trips are reproducible.
pub fn save_checkpoint(
    path: &Path,
    meta: Value,
    tensors: &[(&str, &Array2<f64>)],
) -> Result<(), AdapterError> {
    let mut names = std::collections::BTreeSet::new();
    for (name, _) in tensors {
        if !names.insert(*name) {
            return Err(AdapterError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("duplicate tensor name {name:?}"),
            });
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: (*name).into(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
        meta,
    };
    let header_json = serde_json::to_value(&header).map_err(|e| AdapterError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let values: Vec<f64> = tensors
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect();
    let bytes = binio::encode_blob(&header_json, &values);
    binio::atomic_write(path, &bytes).map_err(|e| AdapterError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a checkpoint back as `(meta, named tensors)` in file order.
pub fn load_checkpoint(path: &Path) -> Result<(Value, Vec<(String, Array2<f64>)>), AdapterError> {
    let err = |reason: String| AdapterError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let (header_json, values) = binio::decode_blob(&bytes).map_err(|e| err(e.to_string()))?;
    let header: CheckpointHeader =
        serde_json::from_value(header_json).map_err(|e| err(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unexpected format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if values.len() != expected {
        return Err(err(format!(
            "payload holds {} values but the header declares {expected}",
            values.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for entry in header.tensors {
        let count = entry.rows * entry.cols;
        let slice = values[offset..offset + count].to_vec();
        offset += count;
        let tensor = Array2::from_shape_vec((entry.rows, entry.cols), slice)
            .map_err(|e| err(e.to_string()))?;
        tensors.push((entry.name, tensor));
    }
    Ok((header.meta, tensors))
}

impl super::AdapterParams {
    /// Replaces adapter tensors from a loaded `(name, tensor)` list; names
    /// not starting with `adapter.` are ignored so a trainer checkpoint can
    /// carry extra tensors. Missing or misshapen adapter tensors are errors.
    pub fn load_tensors(
        &mut self,
        tensors: &[(String, Array2<f64>)],
        path: &Path,
    ) -> Result<(), AdapterError> {
        let err = |reason: String| AdapterError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        for (name, target) in self.named_tensors_mut() {
            let found = tensors.iter().find(|(n, _)| n == name);
            let (_, tensor) = found.ok_or_else(|| err(format!("missing tensor {name:?}")))?;
            if tensor.raw_dim() != target.raw_dim() {
                return Err(err(format!(
                    "tensor {name:?} has shape ({}, {}) but the model expects ({}, {})",
                    tensor.nrows(),
                    tensor.ncols(),
                    target.nrows(),
                    target.ncols()
                )));
            }
            target.assign(tensor);
        }
        Ok(())
    }
}

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, Embedding};
use crate::error::{Error, Result};
use crate::formats::{self, EmbeddingRecord};

/// Order of the tensor blocks of one tower inside a checkpoint. The image
/// tower is written first, then the LiDAR tower.
pub const PARAMETER_ORDER: [&str; 8] = [
    "patch_w", "patch_b", "hidden_w", "hidden_b", "out_w", "out_b", "proj_w", "proj_b",
];

/// JSON header of a `CKPT` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub image_encoder: EncoderConfig,
    pub lidar_encoder: EncoderConfig,
    pub epoch: usize,
    pub step: usize,
    pub parameter_order: Vec<String>,
}

impl CheckpointHeader {
    pub fn new(image: &EncoderConfig, lidar: &EncoderConfig, epoch: usize, step: usize) -> Self {
        Self {
            image_encoder: image.clone(),
            lidar_encoder: lidar.clone(),
            epoch,
            step,
            parameter_order: PARAMETER_ORDER.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// `CKPT`, u32 JSON length, JSON header, then 16 tensor blocks. Values are
/// stored as f32.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    header: &CheckpointHeader,
    image: &EncoderParams,
    lidar: &EncoderParams,
) -> Result<()> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    formats::write_bytes(w, formats::CHECKPOINT_MAGIC)?;
    formats::write_u32(w, json.len() as u32)?;
    formats::write_bytes(w, &json)?;
    for params in [image, lidar] {
        for ((rows, cols), data) in params.shapes().into_iter().zip(params.tensors()) {
            let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            formats::write_tensor_block(w, rows, cols, &narrowed)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointHeader, EncoderParams, EncoderParams)> {
    formats::expect_magic(r, formats::CHECKPOINT_MAGIC)?;
    let len = formats::read_u32(r)? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&formats::read_bytes(r, len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.image_encoder.validate()?;
    header.lidar_encoder.validate()?;
    let mut towers = Vec::with_capacity(2);
    for config in [&header.image_encoder, &header.lidar_encoder] {
        let mut params = EncoderParams::zeros(config);
        let shapes = params.shapes();
        for (i, (shape, dst)) in shapes.into_iter().zip(params.tensors_mut()).enumerate() {
            let (rows, cols, data) = formats::read_tensor_block(r)?;
            if (rows, cols) != shape {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} is {rows}×{cols}, config implies {}×{}",
                    PARAMETER_ORDER[i], shape.0, shape.1
                )));
            }
            for (d, v) in dst.iter_mut().zip(data) {
                *d = v as f64;
            }
        }
        towers.push(params);
    }
    let lidar = towers.pop().expect("two towers");
    let image = towers.pop().expect("two towers");
    Ok((header, image, lidar))
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    image: &EncoderParams,
    lidar: &EncoderParams,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, header, image, lidar)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, EncoderParams, EncoderParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Write `(key, embedding)` rows as an `EMBD` file.
pub fn export_embeddings(path: &Path, rows: &[(String, Embedding)]) -> Result<()> {
    let dim = rows.first().map_or(0, |(_, e)| e.dim());
    let records: Vec<EmbeddingRecord> = rows
        .iter()
        .map(|(key, e)| EmbeddingRecord {
            key: key.clone(),
            values: e.as_slice().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let mut buf = Vec::new();
    formats::write_embedding_file(&mut buf, dim, &records)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read an `EMBD` file, re-normalizing every row. `expected_dim` guards
/// against files produced for a different projection size.
pub fn import_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<Vec<(String, Embedding)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, records) = formats::read_embedding_file(&mut bytes.as_slice())?;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::Validation(format!(
                "{}: embedding dim {dim} does not match configured {expected}",
                path.display()
            )));
        }
    }
    records
        .into_iter()
        .map(|r| {
            let v: Vec<f64> = r.values.iter().map(|&x| x as f64).collect();
            let e = Embedding::normalize(v).map_err(|e| {
                Error::Validation(format!("{}: row {}: {e}", path.display(), r.key))
            })?;
            Ok((r.key, e))
        })
        .collect()
}

//! Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header (configs, history, tensor table) and raw little-endian f32
//! tensor data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::EpochStats;
use super::{DiscriminatorConfig, GanModel, GeneratorConfig, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GCKPT\0\0\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    train: TrainConfig,
    history: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &GanModel<f32>) -> Result<()> {
    let params: Vec<_> = model
        .generator
        .params()
        .into_iter()
        .chain(model.discriminator.params())
        .collect();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.len(),
        });
        offset += p.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        generator: model.generator.config().clone(),
        discriminator: model.discriminator.config().clone(),
        train: model.train_config.clone(),
        history: model.history.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * offset);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &params {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GanModel<f32>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a growthcast checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut model = GanModel::<f32>::new(&header.generator, &header.discriminator, &header.train)
        .map_err(|e| bad(format!("invalid configuration: {e}")))?;
    let entries: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut used = 0;
    for p in model
        .generator
        .params_mut()
        .into_iter()
        .chain(model.discriminator.params_mut())
    {
        let entry = entries
            .get(p.name.as_str())
            .ok_or_else(|| bad(format!("missing tensor {}", p.name)))?;
        if entry.shape != p.shape || entry.len != p.len() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name, entry.shape, p.shape
            )));
        }
        let data = entry
            .offset
            .checked_add(entry.len)
            .and_then(|end| values.get(entry.offset..end))
            .ok_or_else(|| bad(format!("tensor {} lies outside the payload", p.name)))?;
        p.value.copy_from_slice(data);
        used += 1;
    }
    if used != header.tensors.len() {
        return Err(bad(format!(
            "{} tensors in file, model has {used}",
            header.tensors.len()
        )));
    }
    model.history = header.history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> GanModel<f32> {
        let mut m = GanModel::new(
            &GeneratorConfig {
                input_size: 16,
                base_channels: 4,
                depth: 4,
                dropout_rate: 0.5,
            },
            &DiscriminatorConfig {
                patch_levels: 2,
                base_channels: 4,
            },
            &TrainConfig {
                epochs: 2,
                seed: 11,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        m.history.push(EpochStats {
            epoch: 0,
            loss_d: 1.25,
            loss_g_adv: 0.5,
            loss_g_l1: 0.125,
            lr: 1e-4,
            d_updates: 3,
            g_updates: 3,
        });
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let a: Vec<u32> = m
            .generator
            .params()
            .into_iter()
            .chain(m.discriminator.params())
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect();
        let b: Vec<u32> = back
            .generator
            .params()
            .into_iter()
            .chain(back.discriminator.params())
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(a, b);
        assert_eq!(back.history, m.history);
        assert_eq!(back.train_config, m.train_config);
        assert_eq!(back.generator.config(), m.generator.config());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        save_checkpoint(&path, &model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}

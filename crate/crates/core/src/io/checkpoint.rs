//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "RSMCKPT\0"
//! version  u32
//! header   u32 length, JSON bytes, u32 crc32 of the JSON bytes
//! count    u32
//! record*  u16 name length, name, u8 dtype tag, u8 rank, u32 dims[rank],
//!          raw values, u32 crc32 of everything in the record before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{read_file, write_atomic, Cursor, IoError};
use crate::model::{Model, ModelConfig, ModelLayout};
use crate::tensor::{DType, Element, Tensor, TensorError};
use crate::train::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("checksum mismatch in {record}")]
    Checksum { record: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor<T>)>,
}

pub fn encode_checkpoint<T: Element>(model: &Model<T>, norm: &NormStats, seed: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        norm: *norm,
        seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.params().total_numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, name, t) in model.params().iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

fn truncated(what: impl Into<String>) -> impl FnOnce(()) -> CheckpointError {
    let what = what.into();
    move |_| CheckpointError::Truncated { what }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Cursor::new(bytes);
    let magic = r.take(8).map_err(truncated("magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let found = r.u32().map_err(truncated("version"))?;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found });
    }
    let len = r.u32().map_err(truncated("header length"))? as usize;
    let json = r.take(len).map_err(truncated("header"))?;
    let crc = r.u32().map_err(truncated("header checksum"))?;
    if crc32fast::hash(json) != crc {
        return Err(CheckpointError::Checksum { record: "header".into() });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let count = r.u32().map_err(truncated("record count"))? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let start = r.pos();
        let ctx = format!("record {i}");
        let name_len = r.u16().map_err(truncated(&ctx))? as usize;
        let name = r.take(name_len).map_err(truncated(&ctx))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{ctx}: name is not UTF-8")))?;
        let ctx = format!("record `{name}`");
        let tag = r.u8().map_err(truncated(&ctx))?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| CheckpointError::Malformed(format!("{ctx}: unknown dtype tag {tag}")))?;
        let rank = r.u8().map_err(truncated(&ctx))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(truncated(&ctx))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| CheckpointError::Malformed(format!("{ctx}: shape {shape:?} overflows")))?;
        let payload = r.take(numel).map_err(truncated(&ctx))?;
        let body = &bytes[start..r.pos()];
        let crc = r.u32().map_err(truncated(&ctx))?;
        if crc32fast::hash(body) != crc {
            return Err(CheckpointError::Checksum { record: name });
        }
        if dtype != T::DTYPE {
            return Err(CheckpointError::Mismatch(format!(
                "{ctx} holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let data = payload.chunks_exact(dtype.size_of()).map(T::read_le).collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last record",
            r.remaining()
        )));
    }
    Ok(Checkpoint { header, records })
}

impl<T: Element> Checkpoint<T> {
    /// Rebuilds the model, checking every record against the layout implied
    /// by the stored config.
    pub fn into_model(self) -> Result<Model<T>, CheckpointError> {
        self.header
            .config
            .validate()
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let (_, specs) = ModelLayout::build(&self.header.config);
        if specs.len() != self.records.len() {
            return Err(CheckpointError::Mismatch(format!(
                "config expects {} tensors, checkpoint holds {}",
                specs.len(),
                self.records.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.records) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "expected `{}` {:?}, found `{name}` {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        let tensors = self.records.into_iter().map(|(_, t)| t).collect();
        Ok(Model::from_params(self.header.config, tensors)?)
    }
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &Model<T>,
    norm: &NormStats,
    seed: u64,
) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode_checkpoint(model, norm, seed))?)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode_checkpoint(&read_file(path)?)
}

/// Replaces `model`'s parameters with the checkpoint's. Nothing changes
/// unless the whole file is valid and its config equals the model's.
pub fn load_into<T: Element>(model: &mut Model<T>, path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let ckpt = load_checkpoint::<T>(path)?;
    if ckpt.header.config != *model.config() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint config {:?} differs from the model config {:?}",
            ckpt.header.config,
            model.config()
        )));
    }
    let header = ckpt.header.clone();
    *model = ckpt.into_model()?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::init(ModelConfig::tiny(1, 8, 2, 8, 4, 4, 3), 5).unwrap()
    }

    fn norm() -> NormStats {
        NormStats {
            mean: [0.1, 0.2, 0.3],
            std: [1.0, 2.0, 0.5],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let bytes = encode_checkpoint(&m, &norm(), 9);
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(ck.header.seed, 9);
        assert_eq!(ck.header.norm, norm());
        let back = ck.into_model().unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().tensors().iter().zip(m.params().tensors()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn reencoding_reproduces_the_file() {
        // statistics with full-precision mantissas must survive the JSON header
        let m = tiny();
        let awkward = NormStats {
            mean: [0.1 + 0.2, 1.0 / 3.0, -2.0f64.sqrt()],
            std: [std::f64::consts::PI, 1e-7 / 3.0, 0.7000000000000001],
        };
        let bytes = encode_checkpoint(&m, &awkward, 3);
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        let norm = ck.header.norm;
        assert_eq!(encode_checkpoint(&ck.into_model().unwrap(), &norm, 3), bytes);
    }

    #[test]
    fn flipped_payload_byte_names_the_record() {
        let m = tiny();
        let mut bytes = encode_checkpoint(&m, &norm(), 0);
        let at = bytes.len() - 10;
        bytes[at] ^= 0x40;
        let last = m.params().iter().last().unwrap().1.to_string();
        match decode_checkpoint::<f32>(&bytes) {
            Err(CheckpointError::Checksum { record }) => assert_eq!(record, last),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = encode_checkpoint(&tiny(), &norm(), 0);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&v2), Err(CheckpointError::Version { found: 2 })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::BadMagic)));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint::<f32>(&extra), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn dtype_is_checked() {
        let bytes = encode_checkpoint(&tiny().cast::<f64>(), &norm(), 0);
        assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(CheckpointError::Mismatch(_))));
        assert!(decode_checkpoint::<f64>(&bytes).is_ok());
    }

    #[test]
    fn mismatched_config_leaves_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let other = Model::<f32>::init(ModelConfig::tiny(1, 8, 2, 8, 4, 2, 3), 1).unwrap();
        save_checkpoint(&path, &other, &norm(), 0).unwrap();
        let mut m = tiny();
        let before = m.clone();
        assert!(matches!(load_into(&mut m, &path), Err(CheckpointError::Mismatch(_))));
        assert_eq!(m, before);

        save_checkpoint(&path, &Model::<f32>::init(m.config().clone(), 77).unwrap(), &norm(), 3).unwrap();
        assert_eq!(load_into(&mut m, &path).unwrap().seed, 3);
        assert_ne!(m, before);
    }
}

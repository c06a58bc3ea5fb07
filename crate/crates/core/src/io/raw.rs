//! Raw-tensor sample files and the index that lists them.
//!
//! Sample file: `"RSTN"`, u8 dtype tag, u8 rank, u32 dims[rank], then the
//! values, all little-endian. Images are `H×W×3`.
//!
//! Index file: one `path label` pair per line, paths relative to the index's
//! directory. Blank lines and `#` comments are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{read_file, write_atomic, Cursor, IoError};
use crate::model::IMAGE_CHANNELS;
use crate::tensor::{DType, Element, Tensor, TensorError};
use crate::train::{Dataset, InMemoryDataset};

pub const RAW_MAGIC: &[u8; 4] = b"RSTN";

#[derive(Debug, Error)]
pub enum RawError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{index}, line {line}: {msg}")]
    Index { index: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn encode_raw<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + T::DTYPE.size_of() * t.numel());
    out.extend_from_slice(RAW_MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes either dtype into `f32`.
pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let mut r = Cursor::new(bytes);
    let short = |_| "file is truncated".to_string();
    if r.take(4).map_err(short)? != RAW_MAGIC {
        return Err("bad magic bytes".into());
    }
    let tag = r.u8().map_err(short)?;
    let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
    let rank = r.u8().map_err(short)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32().map_err(short)? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = r.take(numel * dtype.size_of()).map_err(short)?;
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    let data = match dtype {
        DType::F32 => payload.chunks_exact(4).map(f32::read_le).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
    };
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_raw<T: Element>(path: &Path, t: &Tensor<T>) -> Result<(), RawError> {
    Ok(write_atomic(path, &encode_raw(t))?)
}

pub fn read_raw(path: &Path) -> Result<Tensor<f32>, RawError> {
    decode_raw(&read_file(path)?).map_err(|msg| RawError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// A dataset read from an index file into memory.
pub struct RawTensorDataset;

impl RawTensorDataset {
    /// Loads every listed sample. With `num_classes = None` the class count is
    /// one more than the largest label.
    pub fn open(index: &Path, num_classes: Option<usize>) -> Result<InMemoryDataset, RawError> {
        let text = String::from_utf8(read_file(index)?).map_err(|_| RawError::Format {
            path: index.to_path_buf(),
            msg: "index is not UTF-8".into(),
        })?;
        let dir = index.parent().unwrap_or(Path::new("."));
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| RawError::Index {
                index: index.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (file, label) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| bad("expected `path label`".into()))?;
            let label: usize = label
                .parse()
                .map_err(|_| bad(format!("label `{label}` is not a class index")))?;
            if let Some(c) = num_classes {
                if label >= c {
                    return Err(bad(format!("label {label} out of range for {c} classes")));
                }
            }
            let img = read_raw(&dir.join(file.trim()))?;
            if img.shape().len() != 3 || img.shape()[2] != IMAGE_CHANNELS {
                return Err(bad(format!("{file}: expected H×W×3, got {:?}", img.shape())));
            }
            match &shape {
                None => shape = Some(img.shape().to_vec()),
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(bad(format!("{file}: shape {:?} differs from {s:?}", img.shape())));
                }
                _ => {}
            }
            images.push(img);
            labels.push(label);
        }
        if images.is_empty() {
            return Err(RawError::Format {
                path: index.to_path_buf(),
                msg: "index lists no samples".into(),
            });
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        Ok(InMemoryDataset::new(images, labels, classes)?)
    }
}

/// Writes every sample to `dir` and returns the path of the index file.
pub fn export_dataset(ds: &dyn Dataset, dir: &Path) -> Result<PathBuf, RawError> {
    fs::create_dir_all(dir).map_err(|e| IoError::new(dir, e))?;
    let mut index = String::new();
    for i in 0..ds.len() {
        let (img, label) = ds.sample(i)?;
        let name = format!("sample_{i:06}.rstn");
        write_raw(&dir.join(&name), &img)?;
        writeln!(index, "{name} {label}").unwrap();
    }
    let path = dir.join("index.txt");
    write_atomic(&path, index.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::SyntheticSpec;

    #[test]
    fn raw_round_trip() {
        let t = Tensor::<f32>::new([2, 2, 3], (0..12).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let bytes = encode_raw(&t);
        assert_eq!(&bytes[..4], b"RSTN");
        assert!(decode_raw(&bytes).unwrap().bitwise_eq(&t));
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
        let wide = encode_raw(&t.cast::<f64>());
        assert!(decode_raw(&wide).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn export_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(3, 2, 8, 4, 0.1);
        let index = export_dataset(&spec, dir.path()).unwrap();
        let ds = RawTensorDataset::open(&index, Some(3)).unwrap();
        assert_eq!(ds.len(), 6);
        for i in 0..6 {
            let (a, la) = ds.sample(i).unwrap();
            let (b, lb) = spec.sample(i).unwrap();
            assert!(a.bitwise_eq(&b));
            assert_eq!(la, lb);
        }
        assert!(matches!(
            RawTensorDataset::open(&index, Some(2)),
            Err(RawError::Index { line: 3, .. })
        ));
    }

    #[test]
    fn mixed_geometry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(&dir.path().join("a"), &Tensor::<f32>::zeros([2, 2, 3]).unwrap()).unwrap();
        write_raw(&dir.path().join("b"), &Tensor::<f32>::zeros([3, 2, 3]).unwrap()).unwrap();
        let index = dir.path().join("index.txt");
        fs::write(&index, "a 0\nb 1\n").unwrap();
        assert!(matches!(
            RawTensorDataset::open(&index, None),
            Err(RawError::Index { line: 2, .. })
        ));
    }
}

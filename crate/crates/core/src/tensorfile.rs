//! Portable binary tensor files for spectrogram dumps.
//!
//! Layout: 4-byte magic `TNS1`, `u32` rank, `u32` per dimension, then the
//! payload as little-endian `f32` in row-major order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a tensor file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: truncated tensor file")]
    Truncated { path: String },
    #[error("payload has {actual} values but dims {dims:?} require {expected}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// Writes `data` as a tensor with the given dimensions.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<(), TensorFileError> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(TensorFileError::ShapeMismatch {
            dims: dims.to_vec(),
            expected,
            actual: data.len(),
        });
    }
    let mut out = Vec::with_capacity(8 + dims.len() * 4 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|source| TensorFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a tensor file back as dimensions plus flat payload.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), TensorFileError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| TensorFileError::Io {
        path: display.clone(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(TensorFileError::Truncated { path: display });
    }
    if &bytes[0..4] != MAGIC {
        return Err(TensorFileError::BadMagic { path: display });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(TensorFileError::Truncated { path: display });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + i * 4..12 + i * 4].try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() != header + expected * 4 {
        return Err(TensorFileError::Truncated { path: display });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

//! Binary tensor files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PAIT" | version u16 | dtype u8 | ndim u8 | dims u32 × ndim | payload | crc32 u32
//! ```
//!
//! The CRC covers every byte before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

const MAGIC: &[u8; 4] = b"PAIT";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &LatentTensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 2 + 12 + t.len() * dtype.size() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(3);
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.as_slice() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decode one tensor, returning it with the number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(LatentTensor, usize)> {
    let short = || Error::Format("truncated tensor file".into());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PAIT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_tag(bytes[6])?;
    let ndim = bytes[7] as usize;
    if ndim == 0 || ndim > 3 {
        return Err(Error::Format(format!("unsupported ndim {ndim}")));
    }
    let mut pos = 8;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
        dims.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let mut shape = [1usize; 3];
    shape[3 - ndim..].copy_from_slice(&dims);
    let n: usize = dims.iter().product();
    let payload_end = pos + n * dtype.size();
    let crc_bytes = bytes.get(payload_end..payload_end + 4).ok_or_else(short)?;
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let data = bytes[pos..payload_end]
        .chunks_exact(dtype.size())
        .map(|c| match dtype {
            DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok((LatentTensor::from_vec(shape, data)?, payload_end + 4))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<LatentTensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &LatentTensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t, DType::F64)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<LatentTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

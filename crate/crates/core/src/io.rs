//! Binary tensor dumps and checkpoint containers.
//!
//! Dump layout: magic `CDTF`, version `u16` LE, rank `u8`, extents as `u32`
//! LE, then the row-major payload. Version 1 stores little-endian `f32`
//! (feature maps, point clouds, denoising trajectories); version 2 stores
//! little-endian `f64` and is used inside checkpoints so that resuming is
//! exact at training precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::{Scalar, TensorData};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CDTF";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpPrecision {
    /// Version 1 payload: f32.
    F32,
    /// Version 2 payload: f64.
    F64,
}

impl DumpPrecision {
    fn version(self) -> u16 {
        match self {
            DumpPrecision::F32 => 1,
            DumpPrecision::F64 => 2,
        }
    }
}

pub fn write_tensor<T: Scalar>(
    path: &Path,
    tensor: &TensorData<T>,
    precision: DumpPrecision,
) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&precision.version().to_le_bytes());
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::invalid("write_tensor", "rank exceeds u8"));
    }
    buf.push(rank as u8);
    for &e in tensor.shape() {
        if e > u32::MAX as usize {
            return Err(Error::invalid("write_tensor", "extent exceeds u32"));
        }
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match precision {
        DumpPrecision::F32 => {
            for v in tensor.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DumpPrecision::F64 => {
            for v in tensor.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<TensorData<T>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::TensorFormat { path: path.to_path_buf(), msg: msg.into() };

    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing CDTF magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let rank = bytes[6] as usize;
    let mut off = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 4 > bytes.len() {
            return Err(bad("truncated extents"));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    let data: Vec<T> = match version {
        1 => {
            if bytes.len() - off != numel * 4 {
                return Err(bad("payload size does not match shape"));
            }
            bytes[off..]
                .chunks_exact(4)
                .map(|c| crate::numerics::lit::<T>(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        }
        2 => {
            if bytes.len() - off != numel * 8 {
                return Err(bad("payload size does not match shape"));
            }
            bytes[off..]
                .chunks_exact(8)
                .map(|c| crate::numerics::lit::<T>(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        }
        v => return Err(bad(&format!("unsupported version {}", v))),
    };
    TensorData::new(shape, data)
}

/// Writes a text file, creating parent directories first.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

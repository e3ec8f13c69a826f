//! `.fctt` binary tensor files.
//!
//! Layout: `FCTT`, version byte (1), rank byte, `rank` little-endian `u32`
//! extents, then the row-major `f32` payload in little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{FctError, Result};
use crate::tensor::{numel_of, Tensor};

pub const MAGIC: &[u8; 4] = b"FCTT";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(FctError::Format(format!("rank {} exceeds 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| FctError::Format(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(FctError::Format("missing FCTT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(FctError::Format(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(FctError::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = numel_of(&shape);
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(FctError::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| FctError::data(path, e.to_string()))
}

//! Minimal binary tensor format.
//!
//! Layout: magic `ICAMTNS1` (8 bytes), dtype code (u8, 0 = float32), ndim (u8),
//! dims (little-endian u32 each), then the payload as little-endian float32 in
//! row-major order. Round-trips are bit-identical, which the dataset and
//! checkpoint determinism guarantees rely on.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ICAMTNS1";
pub const DTYPE_F32: u8 = 0;

/// Serialize a tensor into the record format.
pub fn encode(tensor: &ArrayD<f32>) -> Result<Vec<u8>> {
    let dims = tensor.shape();
    if dims.len() > u8::MAX as usize {
        return Err(Error::Contract(format!("too many dims: {}", dims.len())));
    }
    let mut buf = Vec::with_capacity(10 + 4 * dims.len() + 4 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim too large: {d}")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    // row-major payload
    let standard = tensor.as_standard_layout();
    for &v in standard.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parse one tensor record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(ArrayD<f32>, usize)> {
    if bytes.len() < 10 {
        return Err(Error::Format("tensor record truncated before header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
    }
    let ndim = bytes[9] as usize;
    let mut off = 10;
    if bytes.len() < off + 4 * ndim {
        return Err(Error::Format("tensor record truncated in dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let n: usize = dims.iter().product();
    let payload_len = 4 * n;
    if bytes.len() < off + payload_len {
        return Err(Error::Format(format!(
            "tensor payload truncated: need {} bytes, have {}",
            payload_len,
            bytes.len() - off
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let p = off + 4 * i;
        data.push(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()));
    }
    off += payload_len;
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::Format(format!("bad tensor shape: {e}")))?;
    Ok((arr, off))
}

/// Write one tensor to `path`.
pub fn write(path: &Path, tensor: &ArrayD<f32>) -> Result<()> {
    let bytes = encode(tensor)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read one tensor from `path`; trailing bytes are rejected.
pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (arr, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in tensor file: {} unused",
            bytes.len() - used
        )));
    }
    Ok(arr)
}

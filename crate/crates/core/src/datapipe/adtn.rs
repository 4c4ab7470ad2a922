//! `ADTN` tensor files: `"ADTN" | u8 version = 1 | u8 dtype = 0 | u32 ndim |
//! u32 dims[ndim] | f32 LE payload`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADTN";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, expected ADTN".into()));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(Error::Format(format!("unsupported ADTN version {v}"))),
        None => return Err(Error::Format("truncated file while reading version".into())),
    }
    match bytes.get(5) {
        Some(0) => {}
        Some(d) => return Err(Error::Format(format!("unsupported dtype {d}"))),
        None => return Err(Error::Format("truncated file while reading dtype".into())),
    }
    let ndim = u32_at(bytes, 6, "ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for i in 0..ndim {
        dims.push(u32_at(bytes, 10 + 4 * i, "dims")? as usize);
    }
    let start = 10usize.saturating_add(ndim.saturating_mul(4));
    let payload = bytes.len().saturating_sub(start);
    let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if expected.and_then(|n| n.checked_mul(4)) != Some(payload) {
        let expected = expected.map_or("overflow".to_string(), |n| n.to_string());
        return Err(Error::Format(format!(
            "dims {dims:?} need {expected} values but payload holds {payload} bytes ({} values)",
            payload as f64 / 4.0
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

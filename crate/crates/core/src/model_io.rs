//! Model file format: magic `DMLM` | version u32 | k u32 | d u32 | k*d
//! little-endian f32 values. The baseline solver's square matrix uses the
//! same format with k = d.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metric::MetricFactor;

const MODEL_MAGIC: &[u8; 4] = b"DMLM";
const MODEL_VERSION: u32 = 1;

pub fn save_model(path: &Path, factor: &MetricFactor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(factor.k as u32).to_le_bytes())?;
    w.write_all(&(factor.d as u32).to_le_bytes())?;
    for v in &factor.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MetricFactor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Model("file shorter than header".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Model(format!(
            "bad magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Model("truncated header".into()))?;
    let version = u32::from_le_bytes(buf);
    if version != MODEL_VERSION {
        return Err(Error::Model(format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf)
        .map_err(|_| Error::Model("truncated header".into()))?;
    let k = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)
        .map_err(|_| Error::Model("truncated header".into()))?;
    let d = u32::from_le_bytes(buf) as usize;
    let expected = k
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Model(format!("implausible shape {k}x{d}")))?;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Model(format!(
            "truncated payload: {} bytes for shape {k}x{d}, expected {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MetricFactor::new(k, d, values)
}

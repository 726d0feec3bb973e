//! Binary tensor files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   8 bytes   "S3TENSOR"
//! version u32       1
//! rank    u32
//! dims    rank × u64
//! payload numel × f64, row-major
//! ```
//!
//! A checkpoint is a manifest followed by one flat payload:
//!
//! ```text
//! magic   8 bytes   "S3CKPT01"
//! count   u32
//! entry   count × { name_len u32, name UTF-8, rank u32, dims rank × u64,
//!                   offset u64 (in f64 elements from the payload start) }
//! payload Σ numel × f64, entries back to back in manifest order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"S3TENSOR";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Format(msg.into())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| format_err(format!("truncated input: {e}")))?;
    Ok(buf)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let magic: [u8; 8] = read_exact(r)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(read_exact(r)?) as usize;
    let shape = (0..rank)
        .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err("dimension overflow"))?;
    let mut data = Vec::with_capacity(numel.min(1 << 24));
    for _ in 0..numel {
        data.push(f64::from_le_bytes(read_exact(r)?));
    }
    Tensor::new(&shape, data)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"S3CKPT01";

pub fn write_named(w: &mut impl Write, entries: &[(String, &Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += t.numel() as u64;
    }
    for (_, t) in entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// One manifest line of a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn read_manifest(r: &mut impl Read) -> Result<Vec<ManifestEntry>> {
    let magic: [u8; 8] = read_exact(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err("bad checkpoint magic"));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    (0..count)
        .map(|_| {
            let len = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| format_err(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| format_err("name is not UTF-8"))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = u64::from_le_bytes(read_exact(r)?);
            Ok(ManifestEntry { name, shape, offset })
        })
        .collect()
}

pub fn read_named(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let manifest = read_manifest(r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| format_err(format!("payload: {e}")))?;
    manifest
        .into_iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize * 8;
            let bytes = payload
                .get(start..start + numel * 8)
                .ok_or_else(|| format_err(format!("entry {} runs past the payload", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((e.name, Tensor::new(&e.shape, data)?))
        })
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> NumericsError {
    NumericsError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to memory");
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    read_tensor(&mut bytes.as_slice())
}

pub fn save_named(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_named(&mut buf, entries).expect("writing to memory");
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    read_named(&mut bytes.as_slice())
}

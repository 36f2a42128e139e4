//! Single-tensor archive: the interchange format for dataset images and the
//! building block of parameter checkpoints.
//!
//! Layout, all little-endian:
//! ```text
//! "MLT1" | rank: u32 | dims: rank x u32 | data: prod(dims) x f32, row-major
//! ```
//! Values are always stored as f32; writing an f64 array narrows. Round trips
//! of f32 data are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Array, Result, TensorError};

const MAGIC: &[u8; 4] = b"MLT1";

/// Largest element count we will read back. Keeps a corrupt dim field from
/// turning into a giant allocation.
const MAX_ELEMS: u64 = 1 << 31;

pub fn write_tensor_to(w: &mut impl Write, array: &Array) -> Result<()> {
    w.write_all(MAGIC)?;
    let shape = array.shape();
    if shape.len() > u32::MAX as usize {
        return Err(TensorError::Archive("rank exceeds u32".into()));
    }
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(TensorError::Archive(format!("dimension {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match array.as_f32() {
        Some(data) => {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => {
            for v in array.to_f64_vec() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Array> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Archive(format!(
            "bad magic {:?} (expected {:?})",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC),
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Archive(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        numel = numel.saturating_mul(d as u64);
        shape.push(d);
    }
    if numel > MAX_ELEMS {
        return Err(TensorError::Archive(format!("element count {numel} exceeds limit")));
    }
    let mut data = vec![0f32; numel as usize];
    let mut buf = [0u8; 4];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(Array::from_f32(shape, data))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensor(path: &Path, array: &Array) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, array)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Array> {
    let mut r = BufReader::new(File::open(path)?);
    let array = read_tensor_from(&mut r)?;
    // Trailing garbage means the file is not what we think it is.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(array),
        _ => Err(TensorError::Archive(format!(
            "trailing bytes after tensor payload in {}",
            path.display()
        ))),
    }
}

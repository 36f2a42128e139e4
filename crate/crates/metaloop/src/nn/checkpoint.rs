//! Parameter checkpoints: a counted sequence of named tensor archives.
//!
//! Layout, little-endian:
//! ```text
//! "MLP1" | count: u32 | count x ( name_len: u32 | name: utf-8 | tensor archive )
//! ```
//! Entry names are `group/param` (e.g. `conv3/gamma`, `head/w`), written in
//! group order — the order [`build`](super::build) creates. Values are f32
//! on disk; an f32 parameter set round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{read_tensor_from, write_tensor_to, Array};

use super::{build, BackboneConfig, NnError, ParameterSet, Result};

const MAGIC: &[u8; 4] = b"MLP1";

pub fn save_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let count: usize = params.groups.iter().map(|g| g.params.len()).sum();
    w.write_all(&(count as u32).to_le_bytes())?;
    for group in &params.groups {
        for p in &group.params {
            let name = format!("{}/{}", group.name, p.name);
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor_to(&mut w, &p.value)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back against the config that describes its layout.
/// The config supplies group structure and shapes; every entry must match
/// exactly — a missing, extra, or misshapen tensor is an error naming the
/// offender.
pub fn load_checkpoint(path: &Path, config: &BackboneConfig) -> Result<ParameterSet> {
    let file = File::open(path)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u32(&mut r)? as usize;
    if count > 1 << 20 {
        return Err(NnError::Checkpoint(format!("implausible entry count {count}")));
    }
    let mut entries: BTreeMap<String, Array> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(NnError::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("entry name is not utf-8".into()))?;
        let tensor = read_tensor_from(&mut r)?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate entry '{name}'")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(NnError::Checkpoint(format!(
            "{}: trailing bytes after the last entry",
            path.display()
        )));
    }

    // Rebuild the skeleton from the config, then fill it by name.
    let mut params = build(config, 0)?;
    for group in &mut params.groups {
        for p in &mut group.params {
            let name = format!("{}/{}", group.name, p.name);
            let stored = entries.remove(&name).ok_or_else(|| {
                NnError::Checkpoint(format!("missing entry '{name}' for this backbone config"))
            })?;
            if stored.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "entry '{name}' has shape {:?}, config expects {:?}",
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.cast(config.precision);
        }
    }
    if let Some(name) = entries.keys().next() {
        return Err(NnError::Checkpoint(format!(
            "entry '{name}' does not belong to this backbone config"
        )));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

//! Binary checkpoint format for parameter stores.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   4 bytes  b"GTCK"
//! version u32      currently 1
//! count   u32      number of entries
//! entry*  repeated, sorted by name:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u32 * rank
//!   values   f64 * product(extents), little-endian
//! ```
//! Entries are written sorted by parameter name and values convert through
//! `f64`, so saving the same store twice produces byte-identical files.
//! Writes go to a sibling temp file first and are renamed into place, so a
//! crash never leaves a half-written checkpoint behind.

use crate::params::ParamStore;
use crate::scalar::{fl, Real};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad magic (not a checkpoint file)")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    BadVersion { path: String, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("checkpoint does not match store: {msg}")]
    Mismatch { msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Serialize the store to bytes (entries sorted by name).
pub fn to_bytes<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut entries: Vec<(&str, &Tensor<F>)> =
        store.iter().map(|(_, p)| (p.name.as_str(), &p.tensor)).collect();
    entries.sort_by_key(|(name, _)| *name);
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    buf
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(store);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Parse a checkpoint into `(name, shape, values)` entries.
pub fn load_entries(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    parse(&bytes, &path.display().to_string())
}

fn parse(bytes: &[u8], path: &str) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let corrupt = |msg: &str| CheckpointError::Corrupt { path: path.to_string(), msg: msg.to_string() };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Corrupt { path: path.to_string(), msg: "truncated".into() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_string() });
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: path.to_string(), found: version, expected: VERSION });
    }
    let count = take_u32(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| corrupt("entry name is not UTF-8"))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let s = take(&mut pos, 8)?;
            values.push(f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]));
        }
        entries.push((name, shape, values));
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Load a checkpoint into an existing store. Every store parameter must be
/// present with a matching shape and the file must contain nothing extra;
/// trainability flags are left untouched.
pub fn load_into<F: Real>(store: &mut ParamStore<F>, path: &Path) -> Result<(), CheckpointError> {
    let entries = load_entries(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for (name, shape, values) in entries {
        let Some(id) = store.lookup(&name) else {
            return Err(CheckpointError::Mismatch { msg: format!("file has unknown parameter {:?}", name) });
        };
        let param = store.get(id);
        if param.tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::Mismatch {
                msg: format!(
                    "parameter {:?}: file shape {:?} vs store shape {:?}",
                    name,
                    shape,
                    param.tensor.shape()
                ),
            });
        }
        let data: Vec<F> = values.iter().map(|&v| fl(v)).collect();
        store.get_mut(id).tensor = Tensor::from_vec(shape, data).expect("validated shape");
        seen.insert(name);
    }
    for (_, p) in store.iter() {
        if !seen.contains(&p.name) {
            return Err(CheckpointError::Mismatch {
                msg: format!("store parameter {:?} missing from file", p.name),
            });
        }
    }
    Ok(())
}

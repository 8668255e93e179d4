//! Binary checkpoint files: a JSON metadata blob plus named f64 tensors.
//!
//! Layout, all integers little-endian u32 unless noted:
//! 8-byte magic `SSCKPT01`, metadata length + UTF-8 JSON, tensor count,
//! then per tensor: name length + name, rows, cols, row-major f64 values.
//! Values round-trip bit-exactly; gradients are never stored.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSCKPT01";

/// Caps for corrupt headers, far above anything legitimate.
const MAX_META: u32 = 1 << 24;
const MAX_NAME: u32 = 1 << 12;
const MAX_DIM: u32 = 1 << 24;

pub fn save<M: Serialize>(path: &Path, meta: &M, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(format!("encoding metadata: {e}")))?;
    write_u32(&mut w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        write_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        let (rows, cols) = t.shape();
        write_u32(&mut w, rows as u32)?;
        write_u32(&mut w, cols as u32)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r, MAX_META, "metadata length")?;
    let mut meta_json = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta_json)?;
    let meta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::Checkpoint(format!("decoding metadata: {e}")))?;

    let count = read_u32(&mut r, MAX_DIM, "tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r, MAX_NAME, "name length")?;
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r, MAX_DIM, "rows")? as usize;
        let cols = read_u32(&mut r, MAX_DIM, "cols")? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((meta, tensors))
}

/// Copies values into a parameter store. Every store entry must appear with
/// a matching shape; names outside the store (optimizer state) are ignored.
pub fn load_into(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, src) in tensors {
        if let Some(dst) = store.get(name) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint is {:?}, model wants {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
    }
    let found: std::collections::HashSet<&str> =
        tensors.iter().map(|(n, _)| n.as_str()).collect();
    if let Some((missing, _)) = store.iter().find(|(n, _)| !found.contains(n)) {
        return Err(Error::Checkpoint(format!("missing parameter {missing}")));
    }
    for (name, src) in tensors {
        if let Some(dst) = store.get_mut(name) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    Ok(())
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, max: u32, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    let v = u32::from_le_bytes(buf);
    if v > max {
        return Err(Error::Checkpoint(format!("implausible {what}: {v}")));
    }
    Ok(v)
}

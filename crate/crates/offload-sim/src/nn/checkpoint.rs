//! Versioned binary parameter checkpoints.
//!
//! Layout: magic, a UTF-8 header blob (agents store their structured
//! metadata there), then named tensors with shapes and row-major f64 values
//! written as little-endian bit patterns. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NnError};

const MAGIC: &[u8; 8] = b"OFLNN001";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint(
    path: &Path,
    header: &str,
    tensors: &[CheckpointTensor],
) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let hb = header.as_bytes();
    w.write_all(&(hb.len() as u32).to_le_bytes())?;
    w.write_all(hb)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let nb = t.name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let expect: usize = t.shape.iter().product();
        if expect != t.values.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}`: shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        for &v in &t.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<CheckpointTensor>), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint produced by this tool",
            magic
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut hb = vec![0u8; header_len];
    r.read_exact(&mut hb)?;
    let header = String::from_utf8(hb)
        .map_err(|e| NnError::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| NnError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        tensors.push(CheckpointTensor {
            name,
            shape,
            values,
        });
    }
    Ok((header, tensors))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Snapshots a network's parameters under `prefix/`.
pub fn tensors_from_network(prefix: &str, net: &Network) -> Vec<CheckpointTensor> {
    net.params
        .iter()
        .map(|p| CheckpointTensor {
            name: format!("{prefix}/{}", p.name),
            shape: p.shape.clone(),
            values: p.values.clone(),
        })
        .collect()
}

/// Restores parameters saved by `tensors_from_network`; every parameter must
/// be present with a matching shape.
pub fn load_into_network(
    net: &mut Network,
    prefix: &str,
    tensors: &[CheckpointTensor],
) -> Result<(), NnError> {
    for p in &mut net.params {
        let want = format!("{prefix}/{}", p.name);
        let t = tensors
            .iter()
            .find(|t| t.name == want)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{want}`")))?;
        if t.shape != p.shape {
            return Err(NnError::Checkpoint(format!(
                "tensor `{want}`: checkpoint shape {:?} vs network shape {:?}",
                t.shape, p.shape
            )));
        }
        p.values.copy_from_slice(&t.values);
    }
    Ok(())
}

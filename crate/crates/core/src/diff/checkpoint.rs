//! Binary parameter checkpoints.
//!
//! Layout: the ASCII magic `DCGCN1`, then per parameter in registration
//! order: `u32` name length, name bytes (UTF-8), `u32` rank, `u64` per
//! dimension, and the row-major values as `f64`. All integers and floats are
//! little-endian. The file ends after the last parameter.

use std::io::{self, Read, Write};

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"DCGCN1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic header")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("parameter #{index}: expected `{expected}`, found `{found}`")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has {found} parameters, architecture needs {expected}")]
    CountMismatch { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut out: W) -> io::Result<()> {
    out.write_all(MAGIC)?;
    for (_, name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

/// Raw named tensors, in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut cur = Cursor {
        buf: &buf,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Malformed(format!("rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape overflow for `{name}`")))?;
        let bytes = cur.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape.clone(), data)
            .ok_or_else(|| CheckpointError::Malformed(format!("bad shape {shape:?} for `{name}`")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Overwrites `params` from a checkpoint after checking names and shapes one by one.
pub fn load_into<R: Read>(params: &mut ParamStore, input: R) -> Result<(), CheckpointError> {
    let entries = read_checkpoint(input)?;
    if entries.len() != params.len() {
        return Err(CheckpointError::CountMismatch {
            expected: params.len(),
            found: entries.len(),
        });
    }
    let ids: Vec<_> = params.ids().collect();
    for (i, ((name, t), id)) in entries.into_iter().zip(ids).enumerate() {
        if params.name(id) != name {
            return Err(CheckpointError::NameMismatch {
                index: i,
                expected: params.name(id).to_string(),
                found: name,
            });
        }
        if params.get(id).shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: params.get(id).shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        params.set(id, t);
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

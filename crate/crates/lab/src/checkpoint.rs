//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FGRPOCKP"
//! version    u32
//! arch       5 x u64  dim, width, depth, classes, embed
//! seed       u64
//! tensors    u32      count
//!   rank     u32
//!   dims     rank x u64
//!   values   prod(dims) x f64 (IEEE-754 bits)
//! ```
//!
//! Values are stored as raw bits, so a write/read cycle is bitwise exact.

use std::path::Path;

use flashgrpo_core::diff::Tensor;
use flashgrpo_core::model::{Arch, VectorFieldParams};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"FGRPOCKP";
pub const VERSION: u32 = 1;

pub fn encode(params: &VectorFieldParams) -> Vec<u8> {
    let a = params.arch();
    let mut out = Vec::with_capacity(64 + 8 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [a.dim, a.width, a.depth, a.classes, a.embed] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {} (wanted {} more)", self.pos, n));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format!("value {v} does not fit in usize"))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<VectorFieldParams, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (this build reads {VERSION})"));
    }
    let arch = Arch {
        dim: r.usize()?,
        width: r.usize()?,
        depth: r.usize()?,
        classes: r.usize()?,
        embed: r.usize()?,
    };
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let expected = arch.tensor_shapes();
    if count != expected.len() {
        return Err(format!("{} tensors for an architecture with {}", count, expected.len()));
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in &expected {
        let rank = r.u32()? as usize;
        if rank != shape.len() {
            return Err(format!("tensor rank {rank}, expected {}", shape.len()));
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(format!("tensor shape {dims:?}, expected {shape:?}"));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push(Tensor::new(dims, values).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    VectorFieldParams::from_tensors(arch, seed, tensors).map_err(|e| e.to_string())
}

pub fn decode(bytes: &[u8]) -> Result<VectorFieldParams> {
    decode_inner(bytes).map_err(|message| LabError::Checkpoint {
        path: "<memory>".into(),
        message,
    })
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a checkpoint and returns the SHA-256 of its bytes.
pub fn save(path: &Path, params: &VectorFieldParams) -> Result<String> {
    let bytes = encode(params);
    std::fs::write(path, &bytes).map_err(|e| LabError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A checkpoint read from disk together with the hash of its bytes.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub params: VectorFieldParams,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let params = decode_inner(&bytes).map_err(|message| LabError::Checkpoint {
        path: path.to_path_buf(),
        message,
    })?;
    Ok(Loaded {
        params,
        sha256: sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_starts_with_magic_and_version() {
        let p = VectorFieldParams::init(1, Arch::default()).unwrap();
        let b = encode(&p);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let p = VectorFieldParams::init(1, Arch::default()).unwrap();
        let good = encode(&p);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[8] = 9;
        let mut trailing = good.clone();
        trailing.push(0);
        let truncated = &good[..good.len() - 3];
        for b in [&bad_magic[..], &bad_version[..], &trailing[..], truncated, &[][..]] {
            assert!(matches!(decode(b), Err(LabError::Checkpoint { .. })));
        }
    }
}

//! Versioned binary checkpoint: a fixed header followed by every tensor as
//! row-major little-endian `f32` in declared field order.

use std::fs;
use std::path::Path;

use super::params::{Dims, ModelParams};
use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 8] = b"BAGFORGE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum EncoderKind {
    Lite = 0,
    Precomputed = 1,
}

const HEADER_LEN: usize = 8 + 4 * 6;

pub fn to_bytes(p: &ModelParams<f32>) -> Vec<u8> {
    let d = p.dims();
    let kind = if d.lite { EncoderKind::Lite } else { EncoderKind::Precomputed };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * p.num_params());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d.dim as u32, d.relations as u32, d.vocab as u32, d.max_len as u32, kind as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (_, t) in p.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
    };
    if word(0) != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", word(0))));
    }
    let lite = match word(5) {
        0 => true,
        1 => false,
        k => return Err(Error::Checkpoint(format!("unknown encoder kind {k}"))),
    };
    let dims = Dims {
        dim: word(1) as usize,
        relations: word(2) as usize,
        vocab: word(3) as usize,
        max_len: word(4) as usize,
        lite,
    };
    let mut p = ModelParams::<f32>::zeros(dims);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * p.num_params() {
        return Err(Error::Checkpoint(format!("body has {} bytes, header implies {}", body.len(), 4 * p.num_params())));
    }
    let mut words = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for (_, t) in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = words.next().expect("length checked");
        }
    }
    Ok(p)
}

pub fn save(p: &ModelParams<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(p);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    drop(io::open(path)?);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

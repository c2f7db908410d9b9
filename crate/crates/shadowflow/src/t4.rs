//! T4v1 tensor files: magic `T4v1`, four little-endian `u32` dimensions
//! `(n, c, h, w)`, then the values as little-endian `f64` in NCHW order.

use std::path::Path;

use shadowflow_core::{Shape, Tensor4};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"T4v1";
const HEADER: usize = 4 + 4 * 4;

pub fn encode(t: &Tensor4) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER + 8 * t.len());
    out.extend_from_slice(MAGIC);
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a T4v1 buffer; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor4> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "not a T4v1 tensor"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let count = shape.dims().iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match count.and_then(|c| c.checked_mul(8)) {
        Some(n) if n == bytes.len() - HEADER => {}
        _ => return Err(Error::format(origin, format!("payload does not match shape {shape}"))),
    }
    let data = bytes[HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor4::from_vec(shape, data)?)
}

pub fn read(path: &Path) -> Result<Tensor4> {
    decode(&fsutil::read(path)?, path)
}

pub fn write(path: &Path, t: &Tensor4) -> Result<()> {
    fsutil::write_atomic(path, &encode(t))
}

//! Middlebury `.flo`: `f32` magic 202021.25, `i32` width and height, then
//! interleaved `(u, v)` `f32` pairs in row-major order, all little-endian.

use std::path::Path;

use shadowflow_core::flowwarp::FlowField;
use shadowflow_core::{Shape, Tensor4};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: f32 = 202021.25;
/// Dimension cap used by the reference reader as a sanity check.
const MAX_DIM: i32 = 99_999;

/// Encodes the first item of `flow`. Values are stored as `f32`.
pub fn encode(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&(flow.u(0, y, x) as f32).to_le_bytes());
            out.extend_from_slice(&(flow.v(0, y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<FlowField> {
    if bytes.len() < 12 || f32::from_le_bytes(bytes[..4].try_into().unwrap()) != MAGIC {
        return Err(Error::format(origin, "bad .flo magic"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if !(1..=MAX_DIM).contains(&w) || !(1..=MAX_DIM).contains(&h) {
        return Err(Error::format(origin, format!("implausible .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::format(origin, format!("expected {} bytes for {w}x{h}, found {}", 12 + 8 * w * h, bytes.len())));
    }
    let mut t = Tensor4::zeros(Shape::new(1, 2, h, w));
    for (i, c) in bytes[12..].chunks_exact(8).enumerate() {
        let (y, x) = (i / w, i % w);
        t.set(0, 0, y, x, f32::from_le_bytes(c[..4].try_into().unwrap()) as f64);
        t.set(0, 1, y, x, f32::from_le_bytes(c[4..].try_into().unwrap()) as f64);
    }
    Ok(FlowField::new(t)?)
}

pub fn read(path: &Path) -> Result<FlowField> {
    decode(&fsutil::read(path)?, path)
}

pub fn write(path: &Path, flow: &FlowField) -> Result<()> {
    fsutil::write_atomic(path, &encode(flow))
}

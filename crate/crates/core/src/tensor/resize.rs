use alloc::vec::Vec;

use super::Tensor4;
use crate::error::{Error, Result};

/// One output coordinate: the two source taps and the weight of the second.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Half-pixel (align-corners = false) sampling positions, clamped at the low edge.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            Tap { i0, i1: (i0 + 1).min(input - 1), frac: src - i0 as f64 }
        })
        .collect()
}

fn check(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "output size must be >= 1"));
    }
    Ok(())
}

/// Per-channel bilinear resize.
pub fn resize_bilinear(input: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    check(out_h, out_w)?;
    let s = input.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = taps(s.h, out_h);
    let tx = taps(s.w, out_w);
    let mut out = Tensor4::zeros(s.with_spatial(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, y) in ty.iter().enumerate() {
                let r0 = &src[y.i0 * s.w..(y.i0 + 1) * s.w];
                let r1 = &src[y.i1 * s.w..(y.i1 + 1) * s.w];
                for (ox, x) in tx.iter().enumerate() {
                    // written as lerps so constant fields stay exactly constant
                    let top = r0[x.i0] + x.frac * (r0[x.i1] - r0[x.i0]);
                    let bottom = r1[x.i0] + x.frac * (r1[x.i1] - r1[x.i0]);
                    dst[oy * out_w + ox] = top + y.frac * (bottom - top);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters `grad_out` back onto an `in_h x in_w` grid.
pub fn resize_bilinear_backward(grad_out: &Tensor4, in_h: usize, in_w: usize) -> Result<Tensor4> {
    check(in_h, in_w)?;
    let s = grad_out.shape();
    if (s.h, s.w) == (in_h, in_w) {
        return Ok(grad_out.clone());
    }
    let ty = taps(in_h, s.h);
    let tx = taps(in_w, s.w);
    let mut grad_in = Tensor4::zeros(s.with_spatial(in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for (oy, y) in ty.iter().enumerate() {
                for (ox, x) in tx.iter().enumerate() {
                    let v = g[oy * s.w + ox];
                    let (wy1, wx1) = (y.frac, x.frac);
                    let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                    dst[y.i0 * in_w + x.i0] += wy0 * wx0 * v;
                    dst[y.i0 * in_w + x.i1] += wy0 * wx1 * v;
                    dst[y.i1 * in_w + x.i0] += wy1 * wx0 * v;
                    dst[y.i1 * in_w + x.i1] += wy1 * wx1 * v;
                }
            }
        }
    }
    Ok(grad_in)
}

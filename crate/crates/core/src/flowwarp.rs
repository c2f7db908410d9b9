//! Flow-guided feature warping and per-channel feature combination.
//!
//! [`warp`] is a backward warp: output pixel `p` bilinearly samples the
//! source feature map at `p + U(p)`. Sample taps that fall outside the map
//! contribute zero. [`combine`] mixes a frame's own features with warped
//! features from its neighbour using one pair of coefficients per channel,
//! and [`fgwarp`] chains flow resizing, warping and combination.
//!
//! Every forward operation has an analytic backward pass; gradients reach the
//! features, the flow and the combination weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, resize_bilinear_backward, Shape, Tensor4};

/// Per-pixel displacement `(u, v)` in pixels of its own grid: channel 0 is
/// horizontal, channel 1 vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Tensor4);

impl FlowField {
    pub fn new(tensor: Tensor4) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(Error::shape("FlowField", format!("need 2 channels, got {}", tensor.shape().c)));
        }
        Ok(FlowField(tensor))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor4::zeros(Shape::new(n, 2, h, w)))
    }

    /// The same displacement at every pixel.
    pub fn uniform(n: usize, h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut t = Tensor4::zeros(Shape::new(n, 2, h, w));
        for i in 0..n {
            t.plane_mut(i, 0).fill(u);
            t.plane_mut(i, 1).fill(v);
        }
        FlowField(t)
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor4 {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn u(&self, n: usize, y: usize, x: usize) -> f64 {
        self.0.at(n, 0, y, x)
    }

    pub fn v(&self, n: usize, y: usize, x: usize) -> f64 {
        self.0.at(n, 1, y, x)
    }

    pub fn negated(&self) -> FlowField {
        FlowField(self.0.map(|d| -d))
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&d| d == 0.0)
    }
}

/// Per-channel coefficients `w1` (own features) and `w2` (warped features).
#[derive(Debug, Clone, PartialEq)]
pub struct CombineWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl CombineWeights {
    /// `w1 = 1`, `w2 = 0`: the combination returns the frame's own features untouched.
    pub fn identity(channels: usize) -> Self {
        CombineWeights { w1: vec![1.0; channels], w2: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.w1.len()
    }

    fn check(&self, op: &'static str, channels: usize) -> Result<()> {
        if self.w1.len() != channels || self.w2.len() != channels {
            return Err(Error::shape(
                op,
                format!("weights of length {}/{} for {channels} channels", self.w1.len(), self.w2.len()),
            ));
        }
        Ok(())
    }
}

fn check_flow(op: &'static str, features: Shape, flow: &FlowField) -> Result<()> {
    let fs = flow.shape();
    if fs.n != features.n || fs.h != features.h || fs.w != features.w {
        return Err(Error::shape(op, format!("flow {fs} does not cover features {features}")));
    }
    Ok(())
}

/// Bilinear footprint of one sample location. Out-of-range taps have weight
/// zero and no index.
#[derive(Clone, Copy)]
struct Footprint {
    idx: [Option<usize>; 4],
    wgt: [f64; 4],
    ax: f64,
    ay: f64,
}

fn footprint(sx: f64, sy: f64, h: usize, w: usize) -> Result<Option<Footprint>> {
    if !sx.is_finite() || !sy.is_finite() {
        return Err(Error::invalid("warp", "flow contains non-finite displacements"));
    }
    let fx = libm::floor(sx);
    let fy = libm::floor(sy);
    if fx < -1.0 || fy < -1.0 || fx >= w as f64 || fy >= h as f64 {
        return Ok(None);
    }
    let (x0, y0) = (fx as isize, fy as isize);
    let (ax, ay) = (sx - fx, sy - fy);
    let at = |x: isize, y: isize| {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
    };
    Ok(Some(Footprint {
        idx: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        wgt: [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
        ax,
        ay,
    }))
}

fn footprints(flow: &FlowField, n: usize) -> Result<Vec<Option<Footprint>>> {
    let (h, w) = (flow.height(), flow.width());
    let (us, vs) = (flow.0.plane(n, 0), flow.0.plane(n, 1));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            out.push(footprint(x as f64 + us[p], y as f64 + vs[p], h, w)?);
        }
    }
    Ok(out)
}

/// Samples `features` at `p + flow(p)` for every pixel `p`, channel by channel.
pub fn warp(features: &Tensor4, flow: &FlowField) -> Result<Tensor4> {
    let s = features.shape();
    check_flow("warp", s, flow)?;
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        let fps = footprints(flow, n)?;
        for c in 0..s.c {
            let src = features.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (o, fp) in dst.iter_mut().zip(&fps) {
                if let Some(fp) = fp {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        if let Some(i) = fp.idx[k] {
                            acc += fp.wgt[k] * src[i];
                        }
                    }
                    *o = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_features, grad_flow)`.
///
/// The flow gradient uses the one-sided slope of the bilinear kernel; at
/// exactly integral sample positions it is the slope of the cell to the
/// lower-right.
pub fn warp_backward(features: &Tensor4, flow: &FlowField, grad_out: &Tensor4) -> Result<(Tensor4, FlowField)> {
    let s = features.shape();
    check_flow("warp_backward", s, flow)?;
    grad_out.expect_shape("warp_backward", s)?;
    let mut grad_features = Tensor4::zeros(s);
    let mut grad_flow = Tensor4::zeros(flow.shape());
    let plane = s.plane();
    for n in 0..s.n {
        let fps = footprints(flow, n)?;
        let mut du = vec![0.0; plane];
        let mut dv = vec![0.0; plane];
        for c in 0..s.c {
            let src = features.plane(n, c);
            let g = grad_out.plane(n, c);
            let gf = grad_features.plane_mut(n, c);
            for (p, fp) in fps.iter().enumerate() {
                let Some(fp) = fp else { continue };
                let gp = g[p];
                let mut val = [0.0; 4];
                for (k, v) in val.iter_mut().enumerate() {
                    if let Some(i) = fp.idx[k] {
                        gf[i] += fp.wgt[k] * gp;
                        *v = src[i];
                    }
                }
                du[p] += gp * ((1.0 - fp.ay) * (val[1] - val[0]) + fp.ay * (val[3] - val[2]));
                dv[p] += gp * ((1.0 - fp.ax) * (val[2] - val[0]) + fp.ax * (val[3] - val[1]));
            }
        }
        grad_flow.plane_mut(n, 0).copy_from_slice(&du);
        grad_flow.plane_mut(n, 1).copy_from_slice(&dv);
    }
    Ok((grad_features, FlowField(grad_flow)))
}

/// Bilinear resize of both channels, with displacements rescaled into the new
/// pixel units (`u * out_w / in_w`, `v * out_h / in_h`).
pub fn resize_flow(flow: &FlowField, out_h: usize, out_w: usize) -> Result<FlowField> {
    let (in_h, in_w) = (flow.height(), flow.width());
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(flow.clone());
    }
    let mut t = resize_bilinear(&flow.0, out_h, out_w)?;
    let (sx, sy) = (out_w as f64 / in_w as f64, out_h as f64 / in_h as f64);
    for n in 0..t.shape().n {
        t.plane_mut(n, 0).iter_mut().for_each(|u| *u *= sx);
        t.plane_mut(n, 1).iter_mut().for_each(|v| *v *= sy);
    }
    Ok(FlowField(t))
}

/// Adjoint of [`resize_flow`] from an `out_h x out_w` gradient back to `in_h x in_w`.
pub fn resize_flow_backward(grad: &FlowField, in_h: usize, in_w: usize) -> Result<FlowField> {
    let (out_h, out_w) = (grad.height(), grad.width());
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let mut g = grad.0.clone();
    let (sx, sy) = (out_w as f64 / in_w as f64, out_h as f64 / in_h as f64);
    for n in 0..g.shape().n {
        g.plane_mut(n, 0).iter_mut().for_each(|u| *u *= sx);
        g.plane_mut(n, 1).iter_mut().for_each(|v| *v *= sy);
    }
    Ok(FlowField(resize_bilinear_backward(&g, in_h, in_w)?))
}

/// `out[c] = w1[c] * f_self[c] + w2[c] * f_warped[c]`.
pub fn combine(f_self: &Tensor4, f_warped: &Tensor4, weights: &CombineWeights) -> Result<Tensor4> {
    let s = f_self.shape();
    f_warped.expect_shape("combine", s)?;
    weights.check("combine", s.c)?;
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (a, b) = (weights.w1[c], weights.w2[c]);
            let dst = out.plane_mut(n, c);
            for ((o, &x), &y) in dst.iter_mut().zip(f_self.plane(n, c)).zip(f_warped.plane(n, c)) {
                *o = a * x + b * y;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineGrads {
    pub f_self: Tensor4,
    pub f_warped: Tensor4,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

pub fn combine_backward(
    f_self: &Tensor4,
    f_warped: &Tensor4,
    weights: &CombineWeights,
    grad_out: &Tensor4,
) -> Result<CombineGrads> {
    let s = f_self.shape();
    f_warped.expect_shape("combine_backward", s)?;
    grad_out.expect_shape("combine_backward", s)?;
    weights.check("combine_backward", s.c)?;
    let mut gs = Tensor4::zeros(s);
    let mut gw = Tensor4::zeros(s);
    let mut w1 = vec![0.0; s.c];
    let mut w2 = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let (a, b) = (weights.w1[c], weights.w2[c]);
            gs.plane_mut(n, c).iter_mut().zip(g).for_each(|(o, &g)| *o = a * g);
            gw.plane_mut(n, c).iter_mut().zip(g).for_each(|(o, &g)| *o = b * g);
            w1[c] += f_self.plane(n, c).iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
            w2[c] += f_warped.plane(n, c).iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
        }
    }
    Ok(CombineGrads { f_self: gs, f_warped: gw, w1, w2 })
}

/// Intermediates of one [`fgwarp`] evaluation, needed by [`fgwarp_backward`].
#[derive(Debug, Clone)]
pub struct FgwarpCache {
    pub flow: FlowField,
    pub warped: Tensor4,
}

/// Aligns `f_t` to the grid of `f_tk` with `flow` (resized to the feature
/// resolution) and combines the result with `f_tk`.
pub fn fgwarp(f_t: &Tensor4, f_tk: &Tensor4, flow: &FlowField, weights: &CombineWeights) -> Result<Tensor4> {
    fgwarp_forward(f_t, f_tk, flow, weights).map(|(out, _)| out)
}

pub fn fgwarp_forward(
    f_t: &Tensor4,
    f_tk: &Tensor4,
    flow: &FlowField,
    weights: &CombineWeights,
) -> Result<(Tensor4, FgwarpCache)> {
    let s = f_t.shape();
    f_tk.expect_shape("fgwarp", s)?;
    let flow = resize_flow(flow, s.h, s.w)?;
    let warped = warp(f_t, &flow)?;
    let out = combine(f_tk, &warped, weights)?;
    Ok((out, FgwarpCache { flow, warped }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgwarpGrads {
    pub f_t: Tensor4,
    pub f_tk: Tensor4,
    /// At the resolution of the flow that was passed in.
    pub flow: FlowField,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

pub fn fgwarp_backward(
    f_t: &Tensor4,
    f_tk: &Tensor4,
    flow: &FlowField,
    weights: &CombineWeights,
    cache: &FgwarpCache,
    grad_out: &Tensor4,
) -> Result<FgwarpGrads> {
    let cg = combine_backward(f_tk, &cache.warped, weights, grad_out)?;
    let (g_ft, g_flow) = warp_backward(f_t, &cache.flow, &cg.f_warped)?;
    let g_flow = resize_flow_backward(&g_flow, flow.height(), flow.width())?;
    Ok(FgwarpGrads { f_t: g_ft, f_tk: cg.f_self, flow: g_flow, w1: cg.w1, w2: cg.w2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, numeric_grad};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    /// Literal evaluation of the warp sum: every grid location q weighted by
    /// the bilinear kernel max(0, 1-|dx|) * max(0, 1-|dy|).
    fn kernel_sum_warp(f: &Tensor4, flow: &FlowField) -> Tensor4 {
        let s = f.shape();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let sx = x as f64 + flow.u(n, y, x);
                        let sy = y as f64 + flow.v(n, y, x);
                        let mut acc = 0.0;
                        for qy in 0..s.h {
                            for qx in 0..s.w {
                                let k = (1.0 - (qx as f64 - sx).abs()).max(0.0) * (1.0 - (qy as f64 - sy).abs()).max(0.0);
                                acc += k * f.at(n, c, qy, qx);
                            }
                        }
                        out.set(n, c, y, x, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor4::random_uniform(Shape::new(2, 3, 4, 5), -2.0, 2.0, &mut rng);
        assert_eq!(warp(&f, &FlowField::zeros(2, 4, 5)).unwrap(), f);
    }

    #[test]
    fn unit_shift_fills_zero_at_border() {
        let f = row(&[1.0, 2.0, 3.0, 4.0]);
        let out = warp(&f, &FlowField::uniform(1, 1, 4, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn half_pixel_shift_blends_neighbours() {
        let out = warp(&row(&[0.0, 2.0]), &FlowField::uniform(1, 1, 2, 0.5, 0.0)).unwrap();
        assert_eq!(out.data()[0], 1.0);
        // the right tap of the last pixel is out of range
        assert_eq!(out.data()[1], 1.0);
    }

    #[test]
    fn matches_the_kernel_sum_on_random_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor4::random_uniform(Shape::new(2, 2, 5, 6), -2.0, 2.0, &mut rng);
        let flow = FlowField::new(Tensor4::random_uniform(Shape::new(2, 2, 5, 6), -3.0, 3.0, &mut rng)).unwrap();
        let a = warp(&f, &flow).unwrap();
        let b = kernel_sum_warp(&f, &flow);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn integer_flow_is_a_shift_with_zero_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor4::random_uniform(Shape::new(1, 2, 6, 7), -1.0, 1.0, &mut rng);
        for &(du, dv) in &[(2i32, 0i32), (-1, 3), (0, -2), (-3, -1)] {
            let out = warp(&f, &FlowField::uniform(1, 6, 7, du as f64, dv as f64)).unwrap();
            for c in 0..2 {
                for y in 0..6i32 {
                    for x in 0..7i32 {
                        let (sx, sy) = (x + du, y + dv);
                        let expect = if (0..7).contains(&sx) && (0..6).contains(&sy) {
                            f.at(0, c, sy as usize, sx as usize)
                        } else {
                            0.0
                        };
                        assert_eq!(out.at(0, c, y as usize, x as usize), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let f = Tensor4::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(warp(&f, &FlowField::zeros(1, 4, 3)), Err(Error::Shape { .. })));
        assert!(FlowField::new(Tensor4::zeros(Shape::new(1, 3, 2, 2))).is_err());
    }

    #[test]
    fn fully_out_of_bounds_flow_has_no_feature_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor4::random_uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let flow = FlowField::uniform(1, 4, 4, 10.5, -7.25);
        assert!(warp(&f, &flow).unwrap().data().iter().all(|&v| v == 0.0));
        let g = Tensor4::random_uniform(f.shape(), -1.0, 1.0, &mut rng);
        let (gf, gflow) = warp_backward(&f, &flow, &g).unwrap();
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert!(gflow.is_zero());
    }

    #[test]
    fn zero_flow_backward_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor4::random_uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let g = Tensor4::random_uniform(f.shape(), -1.0, 1.0, &mut rng);
        let (gf, _) = warp_backward(&f, &FlowField::zeros(1, 3, 3), &g).unwrap();
        assert_eq!(gf, g);
    }

    /// Flow whose samples sit at least 0.1 px from integer grid lines.
    fn off_grid_flow(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> FlowField {
        let mut t = Tensor4::zeros(Shape::new(n, 2, h, w));
        for v in t.data_mut() {
            let whole = rng.gen_range(-2..=2) as f64;
            *v = whole + rng.gen_range(0.1..0.9);
        }
        FlowField::new(t).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..4 {
            let f = Tensor4::random_uniform(Shape::new(2, 3, 5, 6), -2.0, 2.0, &mut rng);
            let flow = off_grid_flow(&mut rng, 2, 5, 6);
            let probe = Tensor4::random_uniform(f.shape(), -1.0, 1.0, &mut rng);
            let obj = |f: &Tensor4, flow: &FlowField| -> f64 {
                warp(f, flow).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let (gf, gflow) = warp_backward(&f, &flow, &probe).unwrap();
            let nf = numeric_grad(f.data(), 1e-4, |v| obj(&Tensor4::from_vec(f.shape(), v.to_vec()).unwrap(), &flow));
            assert_close(gf.data(), &nf, 1e-4, "warp features");
            let nflow = numeric_grad(flow.tensor().data(), 1e-4, |v| {
                obj(&f, &FlowField::new(Tensor4::from_vec(flow.shape(), v.to_vec()).unwrap()).unwrap())
            });
            assert_close(gflow.tensor().data(), &nflow, 1e-4, "warp flow");
        }
    }

    #[test]
    fn resize_flow_rescales_magnitudes() {
        let small = resize_flow(&FlowField::uniform(1, 8, 8, 4.0, 2.0), 4, 4).unwrap();
        assert_eq!(small, FlowField::uniform(1, 4, 4, 2.0, 1.0));
        let flow = FlowField::uniform(1, 5, 3, 1.5, -0.5);
        assert_eq!(resize_flow(&flow, 5, 3).unwrap(), flow);
        assert!(resize_flow(&FlowField::zeros(1, 6, 6), 3, 9).unwrap().is_zero());
        let wide = resize_flow(&FlowField::uniform(1, 4, 4, 1.0, 1.0), 4, 12).unwrap();
        assert_eq!(wide, FlowField::uniform(1, 4, 12, 3.0, 1.0));
    }

    #[test]
    fn resize_flow_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let flow = FlowField::new(Tensor4::random_uniform(Shape::new(1, 2, 6, 4), -2.0, 2.0, &mut rng)).unwrap();
        let probe = FlowField::new(Tensor4::random_uniform(Shape::new(1, 2, 3, 7), -1.0, 1.0, &mut rng)).unwrap();
        let analytic = resize_flow_backward(&probe, 6, 4).unwrap();
        let numeric = numeric_grad(flow.tensor().data(), 1e-4, |v| {
            let f = FlowField::new(Tensor4::from_vec(flow.shape(), v.to_vec()).unwrap()).unwrap();
            let r = resize_flow(&f, 3, 7).unwrap();
            r.tensor().data().iter().zip(probe.tensor().data()).map(|(a, b)| a * b).sum()
        });
        assert_close(analytic.tensor().data(), &numeric, 1e-5, "resize_flow");
    }

    #[test]
    fn combine_special_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor4::random_uniform(Shape::new(1, 3, 2, 2), -1.0, 1.0, &mut rng);
        let b = Tensor4::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        assert_eq!(combine(&a, &b, &CombineWeights::identity(3)).unwrap(), a);
        let half = CombineWeights { w1: vec![0.5; 3], w2: vec![0.5; 3] };
        let mean = a.zip_map(&b, |x, y| 0.5 * x + 0.5 * y).unwrap();
        assert_eq!(combine(&a, &b, &half).unwrap(), mean);
        assert!(combine(&a, &b, &CombineWeights::identity(2)).is_err());
    }

    #[test]
    fn combine_matches_per_channel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor4::random_uniform(Shape::new(2, 3, 3, 2), -1.0, 1.0, &mut rng);
        let b = Tensor4::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        let w = CombineWeights {
            w1: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            w2: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let out = combine(&a, &b, &w).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..3 {
                    for x in 0..2 {
                        assert_eq!(out.at(n, c, y, x), w.w1[c] * a.at(n, c, y, x) + w.w2[c] * b.at(n, c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn combine_backward_hand_case_and_zero_upstream() {
        let a = row(&[3.0]);
        let b = row(&[-2.0]);
        let w = CombineWeights { w1: vec![0.5], w2: vec![4.0] };
        let g = combine_backward(&a, &b, &w, &row(&[2.0])).unwrap();
        assert_eq!((g.f_self.data()[0], g.f_warped.data()[0], g.w1[0], g.w2[0]), (1.0, 8.0, 6.0, -4.0));
        let z = combine_backward(&a, &b, &w, &row(&[0.0])).unwrap();
        assert_eq!((z.f_self.data()[0], z.f_warped.data()[0], z.w1[0], z.w2[0]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn combine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor4::random_uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut rng);
        let b = Tensor4::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        let w = CombineWeights { w1: vec![0.3, -1.1], w2: vec![1.7, 0.2] };
        let probe = Tensor4::random_uniform(a.shape(), -1.0, 1.0, &mut rng);
        let obj = |a: &Tensor4, b: &Tensor4, w: &CombineWeights| -> f64 {
            combine(a, b, w).unwrap().data().iter().zip(probe.data()).map(|(x, y)| x * y).sum()
        };
        let g = combine_backward(&a, &b, &w, &probe).unwrap();
        let na = numeric_grad(a.data(), 1e-4, |v| obj(&Tensor4::from_vec(a.shape(), v.to_vec()).unwrap(), &b, &w));
        assert_close(g.f_self.data(), &na, 1e-5, "f_self");
        let nb = numeric_grad(b.data(), 1e-4, |v| obj(&a, &Tensor4::from_vec(b.shape(), v.to_vec()).unwrap(), &w));
        assert_close(g.f_warped.data(), &nb, 1e-5, "f_warped");
        let n1 = numeric_grad(&w.w1, 1e-4, |v| obj(&a, &b, &CombineWeights { w1: v.to_vec(), w2: w.w2.clone() }));
        assert_close(&g.w1, &n1, 1e-5, "w1");
        let n2 = numeric_grad(&w.w2, 1e-4, |v| obj(&a, &b, &CombineWeights { w1: w.w1.clone(), w2: v.to_vec() }));
        assert_close(&g.w2, &n2, 1e-5, "w2");
    }

    #[test]
    fn fgwarp_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ft = Tensor4::random_uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let ftk = Tensor4::random_uniform(ft.shape(), -1.0, 1.0, &mut rng);
        let zero = FlowField::zeros(1, 8, 8);
        assert_eq!(fgwarp(&ft, &ftk, &zero, &CombineWeights::identity(2)).unwrap(), ftk);
        let swap = CombineWeights { w1: vec![0.0; 2], w2: vec![1.0; 2] };
        assert_eq!(fgwarp(&ft, &ftk, &zero, &swap).unwrap(), ft);
    }

    #[test]
    fn fgwarp_is_the_composition_of_its_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ft = Tensor4::random_uniform(Shape::new(1, 3, 4, 5), -1.0, 1.0, &mut rng);
        let ftk = Tensor4::random_uniform(ft.shape(), -1.0, 1.0, &mut rng);
        let flow = FlowField::new(Tensor4::random_uniform(Shape::new(1, 2, 8, 10), -3.0, 3.0, &mut rng)).unwrap();
        let w = CombineWeights { w1: vec![0.2, 0.9, -0.4], w2: vec![0.8, 0.1, 1.3] };
        let expect = combine(&ftk, &warp(&ft, &resize_flow(&flow, 4, 5).unwrap()).unwrap(), &w).unwrap();
        assert_eq!(fgwarp(&ft, &ftk, &flow, &w).unwrap(), expect);
    }

    #[test]
    fn fgwarp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ft = Tensor4::random_uniform(Shape::new(1, 2, 4, 4), -2.0, 2.0, &mut rng);
        let ftk = Tensor4::random_uniform(ft.shape(), -2.0, 2.0, &mut rng);
        // flow at twice the feature resolution; halved samples stay off-grid
        let mut flow = Tensor4::zeros(Shape::new(1, 2, 8, 8));
        for v in flow.data_mut() {
            *v = 2.0 * (rng.gen_range(-1..=1) as f64 + 0.5) + rng.gen_range(-0.3..0.3);
        }
        let flow = FlowField::new(flow).unwrap();
        let w = CombineWeights { w1: vec![0.7, 1.2], w2: vec![0.4, -0.9] };
        let probe = Tensor4::random_uniform(ft.shape(), -1.0, 1.0, &mut rng);
        let obj = |flow: &FlowField| -> f64 {
            fgwarp(&ft, &ftk, flow, &w).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = fgwarp_forward(&ft, &ftk, &flow, &w).unwrap();
        let g = fgwarp_backward(&ft, &ftk, &flow, &w, &cache, &probe).unwrap();
        let nflow = numeric_grad(flow.tensor().data(), 1e-4, |v| {
            obj(&FlowField::new(Tensor4::from_vec(flow.shape(), v.to_vec()).unwrap()).unwrap())
        });
        assert_close(g.flow.tensor().data(), &nflow, 1e-4, "fgwarp flow");
        assert!(g.flow.tensor().data().iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_features(
            seed in any::<u64>(),
            alpha in -4i32..4,
            beta in -4i32..4,
        ) {
            // small-integer coefficients and dyadic flows keep every product exact
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(1, 2, 4, 5);
            let f = Tensor4::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-64..64) as f64 / 8.0).collect()).unwrap();
            let g = Tensor4::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-64..64) as f64 / 8.0).collect()).unwrap();
            let flow = FlowField::new(Tensor4::from_vec(
                Shape::new(1, 2, 4, 5),
                (0..40).map(|_| rng.gen_range(-12..12) as f64 / 4.0).collect(),
            ).unwrap()).unwrap();
            let (a, b) = (alpha as f64, beta as f64);
            let mixed = f.zip_map(&g, |x, y| a * x + b * y).unwrap();
            let lhs = warp(&mixed, &flow).unwrap();
            let rhs = warp(&f, &flow).unwrap().zip_map(&warp(&g, &flow).unwrap(), |x, y| a * x + b * y).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}

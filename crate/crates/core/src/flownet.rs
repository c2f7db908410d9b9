//! Raw optical flow sources and the four-layer flow refinement network.
//!
//! All flows here follow the sampling convention of [`crate::flowwarp::warp`]:
//! a flow on the grid of frame A points, for every pixel of A, at the location
//! in frame B holding the same content, so `warp(B, flow)` aligns B to A.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowwarp::FlowField;
use crate::params::{visit_bn, visit_bn_mut, visit_conv, visit_conv_mut, Parameterized, Visit, VisitMut};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, relu_backward, relu_forward, BatchNorm,
    BatchNormStats, ConvParams, NormMode, Tensor4,
};

/// Flow (2) + frame A (3) + frame B (3) + mean absolute difference (1).
pub const FLOWCNN_IN_CHANNELS: usize = 9;
pub const FLOWCNN_WIDTH: usize = 16;
pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_SEARCH: usize = 8;

/// Per-pixel mean over channels of `|a - b|`, one output channel.
pub fn frame_difference(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.expect_shape("frame_difference", b.shape())?;
    let s = a.shape();
    let mut out = Tensor4::zeros(s.with_channels(1));
    for n in 0..s.n {
        let dst = out.plane_mut(n, 0);
        for c in 0..s.c {
            for ((o, x), y) in dst.iter_mut().zip(a.plane(n, c)).zip(b.plane(n, c)) {
                *o += (x - y).abs();
            }
        }
        dst.iter_mut().for_each(|v| *v /= s.c as f64);
    }
    Ok(out)
}

fn grayscale(frame: &Tensor4, n: usize) -> Vec<f64> {
    let s = frame.shape();
    let mut g = vec![0.0; s.plane()];
    for c in 0..s.c {
        g.iter_mut().zip(frame.plane(n, c)).for_each(|(o, v)| *o += v);
    }
    g.iter_mut().for_each(|v| *v /= s.c as f64);
    g
}

/// Integer block-matching flow on the grid of `frame_a` pointing into `frame_b`.
///
/// For each `block x block` tile of A (edge tiles may be smaller) every
/// displacement in `[-search, search]^2` that keeps the tile inside B is
/// scored by the sum of absolute grayscale differences. Ties go to the
/// smaller displacement magnitude, then to the lexicographically smaller
/// `(u, v)`. Every pixel of a tile receives the tile's vector.
pub fn estimate_flow_blockmatch(frame_a: &Tensor4, frame_b: &Tensor4, block: usize, search: usize) -> Result<FlowField> {
    frame_a.expect_shape("estimate_flow_blockmatch", frame_b.shape())?;
    let s = frame_a.shape();
    if block == 0 || block > s.h || block > s.w {
        return Err(Error::invalid(
            "estimate_flow_blockmatch",
            format!("block {block} does not fit a {}x{} frame", s.h, s.w),
        ));
    }
    let (h, w) = (s.h, s.w);
    let search = search as isize;
    let mut flow = FlowField::zeros(s.n, h, w);
    for n in 0..s.n {
        let ga = grayscale(frame_a, n);
        let gb = grayscale(frame_b, n);
        for by in (0..h).step_by(block) {
            let bh = block.min(h - by);
            for bx in (0..w).step_by(block) {
                let bw = block.min(w - bx);
                let mut best = (f64::INFINITY, 0isize, 0isize);
                for v in -search..=search {
                    let y0 = by as isize + v;
                    if y0 < 0 || y0 as usize + bh > h {
                        continue;
                    }
                    for u in -search..=search {
                        let x0 = bx as isize + u;
                        if x0 < 0 || x0 as usize + bw > w {
                            continue;
                        }
                        let mut sad = 0.0;
                        for y in 0..bh {
                            let ra = &ga[(by + y) * w + bx..][..bw];
                            let rb = &gb[(y0 as usize + y) * w + x0 as usize..][..bw];
                            sad += ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).sum::<f64>();
                        }
                        if better((sad, u, v), best) {
                            best = (sad, u, v);
                        }
                    }
                }
                let t = flow.tensor_mut();
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        t.set(n, 0, y, x, best.1 as f64);
                        t.set(n, 1, y, x, best.2 as f64);
                    }
                }
            }
        }
    }
    Ok(flow)
}

fn better(cand: (f64, isize, isize), best: (f64, isize, isize)) -> bool {
    if cand.0 != best.0 {
        return cand.0 < best.0;
    }
    let mag = |u: isize, v: isize| u * u + v * v;
    (mag(cand.1, cand.2), cand.1, cand.2) < (mag(best.1, best.2), best.1, best.2)
}

/// Layers L1..L4 of the refinement network; L1 and L2 are followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCnnParams {
    pub l1: ConvParams,
    pub bn1: BatchNorm,
    pub l2: ConvParams,
    pub bn2: BatchNorm,
    pub l3: ConvParams,
    pub l4: ConvParams,
}

impl FlowCnnParams {
    /// He-uniform L1..L3. L4 starts as a pass-through of the raw flow that is
    /// concatenated after L3, so a fresh network returns its input flow.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let mut l4 = ConvParams::zeros(2, FLOWCNN_WIDTH + 2, 3, 1, 1)?;
        l4.weight.set(0, FLOWCNN_WIDTH, 1, 1, 1.0);
        l4.weight.set(1, FLOWCNN_WIDTH + 1, 1, 1, 1.0);
        Ok(FlowCnnParams {
            l1: ConvParams::he_uniform(FLOWCNN_WIDTH, FLOWCNN_IN_CHANNELS, 3, 1, rng)?,
            bn1: BatchNorm::new(FLOWCNN_WIDTH),
            l2: ConvParams::he_uniform(FLOWCNN_WIDTH, FLOWCNN_WIDTH, 3, 1, rng)?,
            bn2: BatchNorm::new(FLOWCNN_WIDTH),
            l3: ConvParams::he_uniform(FLOWCNN_WIDTH, FLOWCNN_WIDTH, 3, 1, rng)?,
            l4,
        })
    }

    /// Every weight and bias zero; batch norms at their defaults.
    pub fn zeros() -> Result<Self> {
        Ok(FlowCnnParams {
            l1: ConvParams::zeros(FLOWCNN_WIDTH, FLOWCNN_IN_CHANNELS, 3, 1, 1)?,
            bn1: BatchNorm::new(FLOWCNN_WIDTH),
            l2: ConvParams::zeros(FLOWCNN_WIDTH, FLOWCNN_WIDTH, 3, 1, 1)?,
            bn2: BatchNorm::new(FLOWCNN_WIDTH),
            l3: ConvParams::zeros(FLOWCNN_WIDTH, FLOWCNN_WIDTH, 3, 1, 1)?,
            l4: ConvParams::zeros(2, FLOWCNN_WIDTH + 2, 3, 1, 1)?,
        })
    }

    /// Same layout, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, _, d| d.fill(0.0));
        z
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        let mut values = Vec::new();
        other.visit(&mut |_, _, _, d| values.push(d.to_vec()));
        let mut it = values.into_iter();
        self.visit_mut(&mut |_, _, _, d| {
            let src = it.next().expect("identical layouts");
            d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        });
    }
}

impl Parameterized for FlowCnnParams {
    fn visit(&self, f: &mut Visit<'_>) {
        visit_conv("l1", &self.l1, f);
        visit_bn("bn1", &self.bn1, f);
        visit_conv("l2", &self.l2, f);
        visit_bn("bn2", &self.bn2, f);
        visit_conv("l3", &self.l3, f);
        visit_conv("l4", &self.l4, f);
    }

    fn visit_mut(&mut self, f: &mut VisitMut<'_>) {
        visit_conv_mut("l1", &mut self.l1, f);
        visit_bn_mut("bn1", &mut self.bn1, f);
        visit_conv_mut("l2", &mut self.l2, f);
        visit_bn_mut("bn2", &mut self.bn2, f);
        visit_conv_mut("l3", &mut self.l3, f);
        visit_conv_mut("l4", &mut self.l4, f);
    }
}

/// Intermediates of [`flowcnn_forward`].
#[derive(Debug, Clone)]
pub struct FlowCnnCache {
    input: Tensor4,
    z1: Tensor4,
    s1: BatchNormStats,
    y1: Tensor4,
    r1: Tensor4,
    z2: Tensor4,
    s2: BatchNormStats,
    y2: Tensor4,
    r2: Tensor4,
    skip: Tensor4,
}

impl FlowCnnCache {
    /// Batch statistics of the two normalization layers.
    pub fn norm_stats(&self) -> (&BatchNormStats, &BatchNormStats) {
        (&self.s1, &self.s2)
    }

    /// Sign of every ReLU input (`true` where it passes gradient).
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.y1.data().iter().chain(self.y2.data()).map(|&v| v > 0.0).collect()
    }
}

/// The 9-channel network input: raw flow, both frames, their difference.
pub fn flowcnn_input(raw_flow: &FlowField, frame_a: &Tensor4, frame_b: &Tensor4) -> Result<Tensor4> {
    let fs = raw_flow.shape();
    let a = frame_a.shape();
    if a != frame_b.shape() || a.c != 3 || (fs.n, fs.h, fs.w) != (a.n, a.h, a.w) {
        return Err(Error::shape(
            "flowcnn_forward",
            format!("flow {fs}, frames {a} and {} must share resolution (frames RGB)", frame_b.shape()),
        ));
    }
    let diff = frame_difference(frame_a, frame_b)?;
    Tensor4::concat_channels(&[raw_flow.tensor(), frame_a, frame_b, &diff])
}

/// Refines `raw_flow` (on the grid of `frame_a`, pointing into `frame_b`).
pub fn flowcnn_forward(
    raw_flow: &FlowField,
    frame_a: &Tensor4,
    frame_b: &Tensor4,
    params: &FlowCnnParams,
    mode: NormMode,
) -> Result<(FlowField, FlowCnnCache)> {
    let input = flowcnn_input(raw_flow, frame_a, frame_b)?;
    let z1 = conv2d_forward(&input, &params.l1)?;
    let (y1, s1) = batchnorm_forward(&z1, &params.bn1, mode)?;
    let r1 = relu_forward(&y1);
    let z2 = conv2d_forward(&r1, &params.l2)?;
    let (y2, s2) = batchnorm_forward(&z2, &params.bn2, mode)?;
    let r2 = relu_forward(&y2);
    let z3 = conv2d_forward(&r2, &params.l3)?;
    let skip = Tensor4::concat_channels(&[&z3, raw_flow.tensor()])?;
    let out = conv2d_forward(&skip, &params.l4)?;
    let refined = FlowField::new(out)?;
    Ok((refined, FlowCnnCache { input, z1, s1, y1, r1, z2, s2, y2, r2, skip }))
}

/// Gradients for every parameter (batch-norm running statistics stay zero)
/// and for the raw flow, which reaches the output through both L1 and the skip into L4.
pub fn flowcnn_backward(
    params: &FlowCnnParams,
    cache: &FlowCnnCache,
    grad_refined: &FlowField,
) -> Result<(FlowCnnParams, FlowField)> {
    let mut g = params.zeros_like();
    let c4 = conv2d_backward(&cache.skip, &params.l4, grad_refined.tensor())?;
    g.l4.weight = c4.weight;
    g.l4.bias = c4.bias;
    let mut parts = c4.input.split_channels(&[FLOWCNN_WIDTH, 2])?.into_iter();
    let g_z3 = parts.next().expect("two parts");
    let mut g_raw = parts.next().expect("two parts");

    let c3 = conv2d_backward(&cache.r2, &params.l3, &g_z3)?;
    g.l3.weight = c3.weight;
    g.l3.bias = c3.bias;
    let g_y2 = relu_backward(&cache.y2, &c3.input)?;
    let (g_z2, gg2, gb2) = batchnorm_backward(&cache.z2, &params.bn2, &cache.s2, &g_y2)?;
    g.bn2.gamma = gg2;
    g.bn2.beta = gb2;

    let c2 = conv2d_backward(&cache.r1, &params.l2, &g_z2)?;
    g.l2.weight = c2.weight;
    g.l2.bias = c2.bias;
    let g_y1 = relu_backward(&cache.y1, &c2.input)?;
    let (g_z1, gg1, gb1) = batchnorm_backward(&cache.z1, &params.bn1, &cache.s1, &g_y1)?;
    g.bn1.gamma = gg1;
    g.bn1.beta = gb1;

    let c1 = conv2d_backward(&cache.input, &params.l1, &g_z1)?;
    g.l1.weight = c1.weight;
    g.l1.bias = c1.bias;
    g_raw.add_assign(&c1.input.channels(0, 2)?)?;
    Ok((g, FlowField::new(g_raw)?))
}

//! Two-branch shadow detector with flow-guided feature exchange.
//!
//! Each branch runs the same three-stage convolutional backbone (weights are
//! shared). After every stage the two branches swap information: each
//! branch's features are warped onto the other frame's grid by the refined
//! flow and mixed in with per-channel weights. The mixed features feed the
//! next stage and the decoder, which fuses the three levels into a one-channel
//! shadow probability map at input resolution.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flownet::{flowcnn_backward, flowcnn_forward, FlowCnnCache, FlowCnnParams};
use crate::flowwarp::{
    combine, combine_backward, fgwarp_backward, fgwarp_forward, CombineWeights, FgwarpCache, FlowField,
};
use crate::params::{
    visit_bn, visit_bn_mut, visit_combine, visit_combine_mut, visit_conv, visit_conv_mut, Parameterized,
    Visit, VisitMut,
};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, relu_backward, relu_forward,
    resize_bilinear, resize_bilinear_backward, sigmoid_backward, sigmoid_forward, BatchNorm, BatchNormStats,
    ConvParams, NormMode, Shape, Tensor4,
};

pub const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channel widths of the low, mid and high level stages.
    pub widths: [usize; LEVELS],
    /// Stride of the first convolution of each stage (>= 2).
    pub strides: [usize; LEVELS],
    /// Square side frames are resized to before entering the network.
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: [8, 16, 32], strides: [2, 2, 2], input_size: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::invalid("BackboneConfig", "stage widths must be >= 1"));
        }
        if self.strides.iter().any(|&s| s < 2) {
            return Err(Error::invalid("BackboneConfig", "every stage must downsample (stride >= 2)"));
        }
        if self.input_size == 0 {
            return Err(Error::invalid("BackboneConfig", "input size must be >= 1"));
        }
        Ok(())
    }
}

/// conv (strided) -> BN -> ReLU -> conv -> BN -> ReLU
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub conv_a: ConvParams,
    pub bn_a: BatchNorm,
    pub conv_b: ConvParams,
    pub bn_b: BatchNorm,
}

impl Stage {
    fn init<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Stage {
            conv_a: ConvParams::he_uniform(out_c, in_c, 3, stride, rng)?,
            bn_a: BatchNorm::new(out_c),
            conv_b: ConvParams::he_uniform(out_c, out_c, 3, 1, rng)?,
            bn_b: BatchNorm::new(out_c),
        })
    }
}

/// Multi-level fusion head: high -> mid -> low -> full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mid: ConvParams,
    pub low: ConvParams,
    pub head: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: BackboneConfig,
    pub stages: [Stage; LEVELS],
    /// Frame t+k's features warped onto frame t, per level.
    pub into_t: [CombineWeights; LEVELS],
    /// Frame t's features warped onto frame t+k, per level.
    pub into_tk: [CombineWeights; LEVELS],
    pub flowcnn: FlowCnnParams,
    pub decoder: Decoder,
}

impl DetectorParams {
    /// Random backbone/decoder, pass-through flow refinement, and exchange
    /// weights `w1 = 1, w2 = 0` so no warping happens at the start.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2] = config.widths;
        let [s0, s1, s2] = config.strides;
        let stages = [Stage::init(3, w0, s0, rng)?, Stage::init(w0, w1, s1, rng)?, Stage::init(w1, w2, s2, rng)?];
        let decoder = Decoder {
            mid: ConvParams::he_uniform(w1, w1 + w2, 3, 1, rng)?,
            low: ConvParams::he_uniform(w0, w0 + w1, 3, 1, rng)?,
            head: ConvParams::he_uniform(1, w0, 1, 1, rng)?,
        };
        let flowcnn = FlowCnnParams::init(rng)?;
        let identity = || config.widths.map(CombineWeights::identity);
        Ok(DetectorParams { config, stages, into_t: identity(), into_tk: identity(), flowcnn, decoder })
    }

    /// Same layout with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, _, d| d.fill(0.0));
        z
    }

    /// Order-sensitive hash of every stored value; ties a forward cache to
    /// the parameters that produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit(&mut |_, _, _, d| {
            for v in d {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        });
        h
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running statistics (branch t before t+k, forward flow before backward).
    pub fn update_running_stats(&mut self, cache: &PairCache) {
        for branch in [&cache.t, &cache.tk] {
            for (stage, sc) in self.stages.iter_mut().zip(&branch.stages) {
                stage.bn_a.update_running(&sc.sa);
                stage.bn_b.update_running(&sc.sb);
            }
        }
        if let Some(ex) = &cache.exchange {
            for fc in [&ex.flowcnn_fwd, &ex.flowcnn_bwd] {
                let (s1, s2) = fc.norm_stats();
                self.flowcnn.bn1.update_running(s1);
                self.flowcnn.bn2.update_running(s2);
            }
        }
    }
}

/// Parameters that only matter when the branches exchange features: the
/// warped-feature coefficients and the flow refinement network.
pub fn is_exchange_param(name: &str) -> bool {
    name.starts_with("flowcnn.") || name.ends_with(".w2")
}

impl Parameterized for DetectorParams {
    fn visit(&self, f: &mut Visit<'_>) {
        for (i, s) in self.stages.iter().enumerate() {
            visit_conv(&format!("backbone.s{}.conv_a", i + 1), &s.conv_a, f);
            visit_bn(&format!("backbone.s{}.bn_a", i + 1), &s.bn_a, f);
            visit_conv(&format!("backbone.s{}.conv_b", i + 1), &s.conv_b, f);
            visit_bn(&format!("backbone.s{}.bn_b", i + 1), &s.bn_b, f);
        }
        for l in 0..LEVELS {
            visit_combine(&format!("exchange.l{}.into_t", l + 1), &self.into_t[l], f);
            visit_combine(&format!("exchange.l{}.into_tk", l + 1), &self.into_tk[l], f);
        }
        self.flowcnn.visit(&mut |name, k, s, d| f(&format!("flowcnn.{name}"), k, s, d));
        visit_conv("decoder.mid", &self.decoder.mid, f);
        visit_conv("decoder.low", &self.decoder.low, f);
        visit_conv("decoder.head", &self.decoder.head, f);
    }

    fn visit_mut(&mut self, f: &mut VisitMut<'_>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            visit_conv_mut(&format!("backbone.s{}.conv_a", i + 1), &mut s.conv_a, f);
            visit_bn_mut(&format!("backbone.s{}.bn_a", i + 1), &mut s.bn_a, f);
            visit_conv_mut(&format!("backbone.s{}.conv_b", i + 1), &mut s.conv_b, f);
            visit_bn_mut(&format!("backbone.s{}.bn_b", i + 1), &mut s.bn_b, f);
        }
        for l in 0..LEVELS {
            visit_combine_mut(&format!("exchange.l{}.into_t", l + 1), &mut self.into_t[l], f);
            visit_combine_mut(&format!("exchange.l{}.into_tk", l + 1), &mut self.into_tk[l], f);
        }
        self.flowcnn.visit_mut(&mut |name, k, s, d| f(&format!("flowcnn.{name}"), k, s, d));
        visit_conv_mut("decoder.mid", &mut self.decoder.mid, f);
        visit_conv_mut("decoder.low", &mut self.decoder.low, f);
        visit_conv_mut("decoder.head", &mut self.decoder.head, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: NormMode,
    /// When false the branches do not exchange features and the flow
    /// refinement network is not evaluated; each level's combined features
    /// reduce to `w1 * f`.
    pub exchange: bool,
}

impl ForwardOptions {
    pub const TRAIN: ForwardOptions = ForwardOptions { mode: NormMode::Train, exchange: true };
    pub const EVAL: ForwardOptions = ForwardOptions { mode: NormMode::Eval, exchange: true };
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor4,
    za: Tensor4,
    sa: BatchNormStats,
    ya: Tensor4,
    ra: Tensor4,
    zb: Tensor4,
    sb: BatchNormStats,
    yb: Tensor4,
}

fn stage_forward(x: &Tensor4, stage: &Stage, mode: NormMode) -> Result<(Tensor4, StageCache)> {
    let za = conv2d_forward(x, &stage.conv_a)?;
    let (ya, sa) = batchnorm_forward(&za, &stage.bn_a, mode)?;
    let ra = relu_forward(&ya);
    let zb = conv2d_forward(&ra, &stage.conv_b)?;
    let (yb, sb) = batchnorm_forward(&zb, &stage.bn_b, mode)?;
    let out = relu_forward(&yb);
    Ok((out, StageCache { input: x.clone(), za, sa, ya, ra, zb, sb, yb }))
}

fn stage_backward(stage: &Stage, cache: &StageCache, g_out: &Tensor4, grads: &mut Stage) -> Result<Tensor4> {
    let g_yb = relu_backward(&cache.yb, g_out)?;
    let (g_zb, gg, gb) = batchnorm_backward(&cache.zb, &stage.bn_b, &cache.sb, &g_yb)?;
    accumulate(&mut grads.bn_b.gamma, &gg);
    accumulate(&mut grads.bn_b.beta, &gb);
    let cb = conv2d_backward(&cache.ra, &stage.conv_b, &g_zb)?;
    grads.conv_b.weight.add_assign(&cb.weight)?;
    accumulate(&mut grads.conv_b.bias, &cb.bias);
    let g_ya = relu_backward(&cache.ya, &cb.input)?;
    let (g_za, gg, gb) = batchnorm_backward(&cache.za, &stage.bn_a, &cache.sa, &g_ya)?;
    accumulate(&mut grads.bn_a.gamma, &gg);
    accumulate(&mut grads.bn_a.beta, &gb);
    let ca = conv2d_backward(&cache.input, &stage.conv_a, &g_za)?;
    grads.conv_a.weight.add_assign(&ca.weight)?;
    accumulate(&mut grads.conv_a.bias, &ca.bias);
    Ok(ca.input)
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone)]
struct DecoderCache {
    taps: [Shape; LEVELS],
    cat_mid: Tensor4,
    z_mid: Tensor4,
    cat_low: Tensor4,
    z_low: Tensor4,
    up_low: Tensor4,
    mask: Tensor4,
}

fn decoder_forward(taps: [&Tensor4; LEVELS], dec: &Decoder, out_h: usize, out_w: usize) -> Result<(Tensor4, DecoderCache)> {
    let [c1, c2, c3] = taps;
    let up_high = resize_bilinear(c3, c2.shape().h, c2.shape().w)?;
    let cat_mid = Tensor4::concat_channels(&[c2, &up_high])?;
    let z_mid = conv2d_forward(&cat_mid, &dec.mid)?;
    let r_mid = relu_forward(&z_mid);
    let up_mid = resize_bilinear(&r_mid, c1.shape().h, c1.shape().w)?;
    let cat_low = Tensor4::concat_channels(&[c1, &up_mid])?;
    let z_low = conv2d_forward(&cat_low, &dec.low)?;
    let r_low = relu_forward(&z_low);
    let up_low = resize_bilinear(&r_low, out_h, out_w)?;
    let logits = conv2d_forward(&up_low, &dec.head)?;
    let mask = sigmoid_forward(&logits);
    let cache = DecoderCache {
        taps: [c1.shape(), c2.shape(), c3.shape()],
        cat_mid,
        z_mid,
        cat_low,
        z_low,
        up_low,
        mask: mask.clone(),
    };
    Ok((mask, cache))
}

fn decoder_backward(dec: &Decoder, cache: &DecoderCache, g_mask: &Tensor4, grads: &mut Decoder) -> Result<[Tensor4; LEVELS]> {
    let [s1, s2, s3] = cache.taps;
    let g_logits = sigmoid_backward(&cache.mask, g_mask)?;
    let ch = conv2d_backward(&cache.up_low, &dec.head, &g_logits)?;
    grads.head.weight.add_assign(&ch.weight)?;
    accumulate(&mut grads.head.bias, &ch.bias);
    let g_r_low = resize_bilinear_backward(&ch.input, cache.z_low.shape().h, cache.z_low.shape().w)?;
    let g_z_low = relu_backward(&cache.z_low, &g_r_low)?;
    let cl = conv2d_backward(&cache.cat_low, &dec.low, &g_z_low)?;
    grads.low.weight.add_assign(&cl.weight)?;
    accumulate(&mut grads.low.bias, &cl.bias);
    let mut parts = cl.input.split_channels(&[s1.c, cache.z_mid.shape().c])?.into_iter();
    let g_c1 = parts.next().expect("two parts");
    let g_up_mid = parts.next().expect("two parts");
    let g_r_mid = resize_bilinear_backward(&g_up_mid, cache.z_mid.shape().h, cache.z_mid.shape().w)?;
    let g_z_mid = relu_backward(&cache.z_mid, &g_r_mid)?;
    let cm = conv2d_backward(&cache.cat_mid, &dec.mid, &g_z_mid)?;
    grads.mid.weight.add_assign(&cm.weight)?;
    accumulate(&mut grads.mid.bias, &cm.bias);
    let mut parts = cm.input.split_channels(&[s2.c, s3.c])?.into_iter();
    let g_c2 = parts.next().expect("two parts");
    let g_up_high = parts.next().expect("two parts");
    let g_c3 = resize_bilinear_backward(&g_up_high, s3.h, s3.w)?;
    Ok([g_c1, g_c2, g_c3])
}

#[derive(Debug, Clone)]
struct BranchCache {
    stages: Vec<StageCache>,
    feats: Vec<Tensor4>,
    decoder: DecoderCache,
}

#[derive(Debug, Clone)]
struct ExchangeCache {
    raw_fwd: FlowField,
    raw_bwd: FlowField,
    refined_fwd: FlowField,
    refined_bwd: FlowField,
    flowcnn_fwd: FlowCnnCache,
    flowcnn_bwd: FlowCnnCache,
    into_tk: Vec<FgwarpCache>,
    into_t: Vec<FgwarpCache>,
}

/// Everything [`backward_pair`] needs from a [`forward_pair`] call.
#[derive(Debug, Clone)]
pub struct PairCache {
    t: BranchCache,
    tk: BranchCache,
    exchange: Option<ExchangeCache>,
    fingerprint: u64,
}

impl PairCache {
    /// Refined flows `(t -> t+k grid, t+k -> t grid)` when the exchange ran.
    pub fn refined_flows(&self) -> Option<(&FlowField, &FlowField)> {
        self.exchange.as_ref().map(|e| (&e.refined_fwd, &e.refined_bwd))
    }

    /// Sign of every ReLU input in the network (`true` where it passes gradient).
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for b in [&self.t, &self.tk] {
            for s in &b.stages {
                out.extend(s.ya.data().iter().chain(s.yb.data()).map(|&v| v > 0.0));
            }
            out.extend(b.decoder.z_mid.data().iter().chain(b.decoder.z_low.data()).map(|&v| v > 0.0));
        }
        if let Some(e) = &self.exchange {
            out.extend(e.flowcnn_fwd.activation_pattern());
            out.extend(e.flowcnn_bwd.activation_pattern());
        }
        out
    }
}

fn check_frames(frame_t: &Tensor4, frame_tk: &Tensor4) -> Result<()> {
    frame_t.expect_shape("forward_pair", frame_tk.shape())?;
    if frame_t.shape().c != 3 {
        return Err(Error::shape("forward_pair", format!("frames must be RGB, got {}", frame_t.shape())));
    }
    Ok(())
}

fn check_flow(flow: &FlowField, frame: Shape) -> Result<()> {
    let s = flow.shape();
    if (s.n, s.h, s.w) != (frame.n, frame.h, frame.w) {
        return Err(Error::shape("forward_pair", format!("flow {s} is not at frame resolution {frame}")));
    }
    Ok(())
}

/// Predicts shadow masks for a frame pair.
///
/// `raw_flow_fwd` lives on the grid of `frame_tk` and points into `frame_t`
/// (it aligns frame t's features to frame t+k); `raw_flow_bwd` is the
/// opposite direction. Both are refined by the shared flow network before use.
pub fn forward_pair(
    frame_t: &Tensor4,
    frame_tk: &Tensor4,
    raw_flow_fwd: &FlowField,
    raw_flow_bwd: &FlowField,
    params: &DetectorParams,
    opts: ForwardOptions,
) -> Result<(Tensor4, Tensor4, PairCache)> {
    check_frames(frame_t, frame_tk)?;
    let fs = frame_t.shape();
    check_flow(raw_flow_fwd, fs)?;
    check_flow(raw_flow_bwd, fs)?;

    let mut ex = if opts.exchange {
        let (refined_fwd, flowcnn_fwd) = flowcnn_forward(raw_flow_fwd, frame_tk, frame_t, &params.flowcnn, opts.mode)?;
        let (refined_bwd, flowcnn_bwd) = flowcnn_forward(raw_flow_bwd, frame_t, frame_tk, &params.flowcnn, opts.mode)?;
        Some(ExchangeCache {
            raw_fwd: raw_flow_fwd.clone(),
            raw_bwd: raw_flow_bwd.clone(),
            refined_fwd,
            refined_bwd,
            flowcnn_fwd,
            flowcnn_bwd,
            into_tk: Vec::with_capacity(LEVELS),
            into_t: Vec::with_capacity(LEVELS),
        })
    } else {
        None
    };

    let (mut x_t, mut x_tk) = (frame_t.clone(), frame_tk.clone());
    let mut bt = (Vec::with_capacity(LEVELS), Vec::with_capacity(LEVELS), Vec::with_capacity(LEVELS));
    let mut btk = (Vec::with_capacity(LEVELS), Vec::with_capacity(LEVELS), Vec::with_capacity(LEVELS));
    for l in 0..LEVELS {
        let (f_t, sc_t) = stage_forward(&x_t, &params.stages[l], opts.mode)?;
        let (f_tk, sc_tk) = stage_forward(&x_tk, &params.stages[l], opts.mode)?;
        let (c_t, c_tk) = match ex.as_mut() {
            Some(ex) => {
                let (c_tk, cache_tk) = fgwarp_forward(&f_t, &f_tk, &ex.refined_fwd, &params.into_tk[l])?;
                let (c_t, cache_t) = fgwarp_forward(&f_tk, &f_t, &ex.refined_bwd, &params.into_t[l])?;
                ex.into_tk.push(cache_tk);
                ex.into_t.push(cache_t);
                (c_t, c_tk)
            }
            None => {
                let zeros = Tensor4::zeros(f_t.shape());
                (combine(&f_t, &zeros, &params.into_t[l])?, combine(&f_tk, &zeros, &params.into_tk[l])?)
            }
        };
        bt.0.push(sc_t);
        bt.1.push(f_t);
        bt.2.push(c_t.clone());
        btk.0.push(sc_tk);
        btk.1.push(f_tk);
        btk.2.push(c_tk.clone());
        x_t = c_t;
        x_tk = c_tk;
    }
    let (mask_t, dc_t) = decoder_forward([&bt.2[0], &bt.2[1], &bt.2[2]], &params.decoder, fs.h, fs.w)?;
    let (mask_tk, dc_tk) = decoder_forward([&btk.2[0], &btk.2[1], &btk.2[2]], &params.decoder, fs.h, fs.w)?;
    let cache = PairCache {
        t: BranchCache { stages: bt.0, feats: bt.1, decoder: dc_t },
        tk: BranchCache { stages: btk.0, feats: btk.1, decoder: dc_tk },
        exchange: ex,
        fingerprint: params.fingerprint(),
    };
    Ok((mask_t, mask_tk, cache))
}

/// One branch on its own, decoding the uncombined stage outputs.
pub fn forward_single(frame: &Tensor4, params: &DetectorParams, mode: NormMode) -> Result<Tensor4> {
    if frame.shape().c != 3 {
        return Err(Error::shape("forward_single", format!("frame must be RGB, got {}", frame.shape())));
    }
    let mut x = frame.clone();
    let mut taps = Vec::with_capacity(LEVELS);
    for stage in &params.stages {
        let (f, _) = stage_forward(&x, stage, mode)?;
        taps.push(f.clone());
        x = f;
    }
    let s = frame.shape();
    decoder_forward([&taps[0], &taps[1], &taps[2]], &params.decoder, s.h, s.w).map(|(m, _)| m)
}

/// Exact gradients of `<grad_mask_t, mask_t> + <grad_mask_tk, mask_tk>` with
/// respect to every trainable tensor. Running statistics come back as zero.
pub fn backward_pair(
    params: &DetectorParams,
    cache: &PairCache,
    grad_mask_t: &Tensor4,
    grad_mask_tk: &Tensor4,
) -> Result<DetectorParams> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    let mut grads = params.zeros_like();
    let mut g_c_t = decoder_backward(&params.decoder, &cache.t.decoder, grad_mask_t, &mut grads.decoder)?;
    let mut g_c_tk = decoder_backward(&params.decoder, &cache.tk.decoder, grad_mask_tk, &mut grads.decoder)?;

    let mut g_ref_fwd: Option<FlowField> = None;
    let mut g_ref_bwd: Option<FlowField> = None;
    for l in (0..LEVELS).rev() {
        let f_t = &cache.t.feats[l];
        let f_tk = &cache.tk.feats[l];
        let (g_f_t, g_f_tk) = match &cache.exchange {
            Some(ex) => {
                let a = fgwarp_backward(f_t, f_tk, &ex.refined_fwd, &params.into_tk[l], &ex.into_tk[l], &g_c_tk[l])?;
                let b = fgwarp_backward(f_tk, f_t, &ex.refined_bwd, &params.into_t[l], &ex.into_t[l], &g_c_t[l])?;
                accumulate(&mut grads.into_tk[l].w1, &a.w1);
                accumulate(&mut grads.into_tk[l].w2, &a.w2);
                accumulate(&mut grads.into_t[l].w1, &b.w1);
                accumulate(&mut grads.into_t[l].w2, &b.w2);
                add_flow(&mut g_ref_fwd, a.flow)?;
                add_flow(&mut g_ref_bwd, b.flow)?;
                let mut g_f_t = a.f_t;
                g_f_t.add_assign(&b.f_tk)?;
                let mut g_f_tk = a.f_tk;
                g_f_tk.add_assign(&b.f_t)?;
                (g_f_t, g_f_tk)
            }
            None => {
                let zeros = Tensor4::zeros(f_t.shape());
                let a = combine_backward(f_t, &zeros, &params.into_t[l], &g_c_t[l])?;
                let b = combine_backward(f_tk, &zeros, &params.into_tk[l], &g_c_tk[l])?;
                accumulate(&mut grads.into_t[l].w1, &a.w1);
                accumulate(&mut grads.into_tk[l].w1, &b.w1);
                (a.f_self, b.f_self)
            }
        };
        let g_in_t = stage_backward(&params.stages[l], &cache.t.stages[l], &g_f_t, &mut grads.stages[l])?;
        let g_in_tk = stage_backward(&params.stages[l], &cache.tk.stages[l], &g_f_tk, &mut grads.stages[l])?;
        if l > 0 {
            g_c_t[l - 1].add_assign(&g_in_t)?;
            g_c_tk[l - 1].add_assign(&g_in_tk)?;
        }
    }

    if let (Some(ex), Some(gf), Some(gb)) = (&cache.exchange, g_ref_fwd, g_ref_bwd) {
        debug_assert_eq!(ex.raw_fwd.shape(), gf.shape());
        debug_assert_eq!(ex.raw_bwd.shape(), gb.shape());
        let (p_fwd, _) = flowcnn_backward(&params.flowcnn, &ex.flowcnn_fwd, &gf)?;
        let (p_bwd, _) = flowcnn_backward(&params.flowcnn, &ex.flowcnn_bwd, &gb)?;
        grads.flowcnn.add_assign(&p_fwd);
        grads.flowcnn.add_assign(&p_bwd);
    }
    Ok(grads)
}

fn add_flow(acc: &mut Option<FlowField>, g: FlowField) -> Result<()> {
    match acc {
        Some(a) => a.tensor_mut().add_assign(g.tensor()),
        None => {
            *acc = Some(g);
            Ok(())
        }
    }
}

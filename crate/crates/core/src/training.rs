//! Training recipe: pair sampling, SGD with momentum and weight decay, the
//! poly learning-rate schedule and the end-to-end loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{backward_pair, forward_pair, is_exchange_param, BackboneConfig, DetectorParams, ForwardOptions};
use crate::error::{Error, Result};
use crate::flownet::{estimate_flow_blockmatch, DEFAULT_BLOCK, DEFAULT_SEARCH};
use crate::flowwarp::{resize_flow, FlowField};
use crate::params::{ParamKind, Parameterized};
use crate::tensor::{mse_loss, resize_bilinear, NormMode, Tensor4};

/// One clip: RGB frames `(1, 3, H, W)`, binary masks `(1, 1, H, W)` and
/// optionally the flow between consecutive frames (`flows[t]` on frame
/// t+1's grid, sampling frame t).
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Tensor4>,
    pub masks: Vec<Tensor4>,
    pub flows: Option<Vec<FlowField>>,
}

impl Video {
    pub fn validate(&self) -> Result<()> {
        let what = |d: String| Error::invalid("Video", format!("{}: {d}", self.name));
        if self.frames.len() != self.masks.len() {
            return Err(what(format!("{} frames but {} masks", self.frames.len(), self.masks.len())));
        }
        let Some(first) = self.frames.first() else {
            return Err(what("no frames".into()));
        };
        let s = first.shape();
        if s.n != 1 || s.c != 3 {
            return Err(what(format!("frames must be (1, 3, H, W), got {s}")));
        }
        for (f, m) in self.frames.iter().zip(&self.masks) {
            if f.shape() != s || m.shape() != s.with_channels(1) {
                return Err(what("frame or mask size differs within the video".into()));
            }
        }
        if let Some(flows) = &self.flows {
            if flows.len() + 1 != self.frames.len() || flows.iter().any(|f| f.shape() != s.with_channels(2)) {
                return Err(what("flow count or size does not match the frames".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

/// Where the raw flow handed to the detector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowSource {
    /// Stored flow when the video carries it and the gap is 1, else block matching.
    #[default]
    GroundTruth,
    BlockMatch { block: usize, search: usize },
    Zero,
}


/// Raw `(forward, backward)` flows for a frame pair at the pair's resolution.
/// Forward lives on `frame_tk`'s grid and samples `frame_t`.
pub fn pair_flows(
    frame_t: &Tensor4,
    frame_tk: &Tensor4,
    stored: Option<&FlowField>,
    source: FlowSource,
) -> Result<(FlowField, FlowField)> {
    let s = frame_t.shape();
    let blockmatch = |block: usize, search: usize| -> Result<(FlowField, FlowField)> {
        let block = block.min(s.h).min(s.w);
        Ok((
            estimate_flow_blockmatch(frame_tk, frame_t, block, search)?,
            estimate_flow_blockmatch(frame_t, frame_tk, block, search)?,
        ))
    };
    match (source, stored) {
        (FlowSource::Zero, _) => Ok((FlowField::zeros(s.n, s.h, s.w), FlowField::zeros(s.n, s.h, s.w))),
        (FlowSource::GroundTruth, Some(f)) => {
            let f = resize_flow(f, s.h, s.w)?;
            let b = f.negated();
            Ok((f, b))
        }
        (FlowSource::GroundTruth, None) => blockmatch(DEFAULT_BLOCK, DEFAULT_SEARCH),
        (FlowSource::BlockMatch { block, search }, _) => blockmatch(block, search),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub poly_power: f64,
    /// Frame gap between the two frames of a pair.
    pub k: usize,
    /// Frames are resized to `input_size` x `input_size`.
    pub input_size: usize,
    pub seed: u64,
    pub widths: [usize; 3],
    /// When false the branches never exchange features and the exchange
    /// parameters stay at their initial values.
    pub fgwarp: bool,
    pub flow_source: FlowSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            max_iters: 2000,
            poly_power: 0.9,
            k: 1,
            input_size: 64,
            seed: 0,
            widths: [8, 16, 32],
            fgwarp: true,
            flow_source: FlowSource::GroundTruth,
        }
    }
}

impl TrainConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { widths: self.widths, input_size: self.input_size, ..BackboneConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("TrainConfig", d));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return bad("poly_power must be positive");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        self.backbone().validate()
    }
}

/// `base_lr * (1 - iter / max_iters) ^ poly_power`
pub fn poly_lr(iter: usize, config: &TrainConfig) -> Result<f64> {
    if config.max_iters == 0 {
        return Err(Error::invalid("poly_lr", "max_iters must be >= 1"));
    }
    if iter > config.max_iters {
        return Err(Error::invalid("poly_lr", format!("iteration {iter} beyond max_iters {}", config.max_iters)));
    }
    if iter == config.max_iters {
        return Ok(0.0);
    }
    Ok(config.base_lr * libm::pow(1.0 - iter as f64 / config.max_iters as f64, config.poly_power))
}

/// Momentum buffers, one per visited tensor (empty for non-trainable ones).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl OptimState {
    pub fn new<P: Parameterized + ?Sized>(params: &P) -> Self {
        let mut velocity = Vec::new();
        params.visit(&mut |_, kind, _, d| velocity.push(if kind.trainable() { vec![0.0; d.len()] } else { Vec::new() }));
        OptimState { velocity, iteration: 0 }
    }
}

/// `v = m v + (g + wd p)`, `p -= lr v` over every trainable tensor.
pub fn sgd_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut OptimState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    sgd_step_where(params, grads, state, lr, config, &|_, kind| kind.trainable())
}

/// [`sgd_step`] restricted to tensors for which `update` holds; the others
/// keep both their value and their velocity.
pub fn sgd_step_where<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut OptimState,
    lr: f64,
    config: &TrainConfig,
    update: &dyn Fn(&str, ParamKind) -> bool,
) -> Result<()> {
    let mut g = Vec::new();
    grads.visit(&mut |name, _, _, d| g.push((String::from(name), d.to_vec())));
    if g.len() != state.velocity.len() {
        return Err(Error::shape("sgd_step", "optimizer state does not match the parameters"));
    }
    let mut err = None;
    let mut i = 0;
    params.visit_mut(&mut |name, kind, _, p| {
        let idx = i;
        i += 1;
        if err.is_some() || !kind.trainable() || !update(name, kind) {
            return;
        }
        let (gname, gv) = &g[idx];
        let v = &mut state.velocity[idx];
        if gname != name || gv.len() != p.len() || v.len() != p.len() {
            err = Some(Error::shape("sgd_step", format!("gradient for {name} does not line up")));
            return;
        }
        let wd = if kind.decays() { config.weight_decay } else { 0.0 };
        for ((p, g), v) in p.iter_mut().zip(gv).zip(v.iter_mut()) {
            *v = config.momentum * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != g.len() {
        return Err(Error::shape("sgd_step", "gradient layout differs from parameter layout"));
    }
    state.iteration += 1;
    Ok(())
}

/// A training pair resized to the network input size.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub video: usize,
    pub t: usize,
    pub k: usize,
    pub frame_t: Tensor4,
    pub frame_tk: Tensor4,
    pub mask_t: Tensor4,
    pub mask_tk: Tensor4,
    /// Stored flow for the pair (gap 1 only), still at native resolution.
    pub stored_flow: Option<FlowField>,
}

/// Picks `(video, t)` uniformly: video first, then a start frame within it.
pub fn sample_indices<R: Rng + ?Sized>(dataset: &Dataset, k: usize, rng: &mut R) -> Result<(usize, usize)> {
    if dataset.videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = rng.gen_range(0..dataset.videos.len());
    let len = dataset.videos[v].frames.len();
    if len <= k {
        return Err(Error::invalid("sample_pair", format!("video {v} has {len} frames, gap is {k}")));
    }
    Ok((v, rng.gen_range(0..len - k)))
}

pub fn sample_pair<R: Rng + ?Sized>(dataset: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<FramePair> {
    let (v, t) = sample_indices(dataset, config.k, rng)?;
    let video = &dataset.videos[v];
    let n = config.input_size;
    let k = config.k;
    Ok(FramePair {
        video: v,
        t,
        k,
        frame_t: resize_bilinear(&video.frames[t], n, n)?,
        frame_tk: resize_bilinear(&video.frames[t + k], n, n)?,
        mask_t: resize_bilinear(&video.masks[t], n, n)?,
        mask_tk: resize_bilinear(&video.masks[t + k], n, n)?,
        stored_flow: if k == 1 { video.flows.as_ref().map(|f| f[t].clone()) } else { None },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: DetectorParams,
    /// Summed two-branch loss at each iteration, before that iteration's update.
    pub losses: Vec<f64>,
    /// `(loss_t, loss_tk)` per iteration.
    pub branch_losses: Vec<(f64, f64)>,
}

/// Trains from a fresh seeded initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = DetectorParams::init(config.backbone(), &mut rng)?;
    train_from(dataset, config, params, &mut rng, &mut |_, _| {})
}

/// Runs `config.max_iters` iterations starting from `params`; pairs are
/// drawn from `rng` and `observe(iteration, loss)` is called after each step.
pub fn train_from<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &TrainConfig,
    mut params: DetectorParams,
    rng: &mut R,
    observe: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for v in &dataset.videos {
        v.validate()?;
    }
    let opts = ForwardOptions { mode: NormMode::Train, exchange: config.fgwarp };
    let update = |name: &str, kind: ParamKind| kind.trainable() && (config.fgwarp || !is_exchange_param(name));
    let mut state = OptimState::new(&params);
    let mut losses = Vec::with_capacity(config.max_iters);
    let mut branch_losses = Vec::with_capacity(config.max_iters);
    for it in 0..config.max_iters {
        let pair = sample_pair(dataset, config, rng)?;
        let (fwd, bwd) = if config.fgwarp {
            pair_flows(&pair.frame_t, &pair.frame_tk, pair.stored_flow.as_ref(), config.flow_source)?
        } else {
            let s = pair.frame_t.shape();
            (FlowField::zeros(1, s.h, s.w), FlowField::zeros(1, s.h, s.w))
        };
        let (mt, mtk, cache) = forward_pair(&pair.frame_t, &pair.frame_tk, &fwd, &bwd, &params, opts)?;
        let (lt, gt) = mse_loss(&mt, &pair.mask_t)?;
        let (ltk, gtk) = mse_loss(&mtk, &pair.mask_tk)?;
        let loss = lt + ltk;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, value: loss });
        }
        losses.push(loss);
        branch_losses.push((lt, ltk));
        let grads = backward_pair(&params, &cache, &gt, &gtk)?;
        params.update_running_stats(&cache);
        sgd_step_where(&mut params, &grads, &mut state, poly_lr(it, config)?, config, &update)?;
        observe(it, loss);
    }
    Ok(TrainOutput { params, losses, branch_losses })
}

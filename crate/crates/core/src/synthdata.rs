//! Synthetic moving-shadow videos with exact masks and flow.
//!
//! A scene is a static smooth texture overlaid with shadow primitives that
//! translate by whole pixels each frame, bouncing off the canvas border so
//! they never leave it. Because every motion is an integer translation, the
//! ground-truth flow reproduces the next mask exactly under [`warp`].
//!
//! [`warp`]: crate::flowwarp::warp

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowwarp::FlowField;
use crate::tensor::{resize_bilinear, Shape, Tensor4};
use crate::training::Video;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveShape {
    Ellipse,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPrimitive {
    pub shape: PrimitiveShape,
    /// `(x, y)` at frame 0.
    pub center: (i64, i64),
    /// Half width and half height in pixels, both >= 1.
    pub half_extent: (i64, i64),
    /// Multiplier applied to covered pixels, in (0, 1).
    pub darkening: f64,
    /// Pixels per frame, `(x, y)`.
    pub velocity: (i64, i64),
}

/// Position along one axis after `t` frames, reflecting off `[lo, hi]`.
fn bounce(start: i64, velocity: i64, t: i64, lo: i64, hi: i64) -> i64 {
    let span = hi - lo;
    if span == 0 {
        return lo;
    }
    let m = (start - lo + velocity * t).rem_euclid(2 * span);
    lo + if m <= span { m } else { 2 * span - m }
}

impl ShadowPrimitive {
    fn covers(&self, (cx, cy): (i64, i64), x: i64, y: i64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let (a, b) = self.half_extent;
        match self.shape {
            PrimitiveShape::Rectangle => dx.abs() <= a && dy.abs() <= b,
            PrimitiveShape::Ellipse => dx * dx * b * b + dy * dy * a * a <= a * a * b * b,
        }
    }

    /// Number of covered pixels (constant, since the primitive stays inside the canvas).
    pub fn area(&self) -> usize {
        let (a, b) = self.half_extent;
        let mut n = 0;
        for y in -b..=b {
            for x in -a..=a {
                if self.covers((0, 0), x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (i64, i64) {
        let (a, b) = self.half_extent;
        let t = t as i64;
        (
            bounce(self.center.0, self.velocity.0, t, a, width as i64 - 1 - a),
            bounce(self.center.1, self.velocity.1, t, b, height as i64 - 1 - b),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub texture_seed: u64,
    /// Seeds the per-frame pixel noise.
    pub noise_seed: u64,
    pub primitives: Vec<ShadowPrimitive>,
    pub frames: usize,
    /// Half-width of the uniform additive noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("SceneSpec", "need at least 2 frames"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("SceneSpec", "empty canvas"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid("SceneSpec", "noise must be finite and >= 0"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let (a, b) = p.half_extent;
            if a < 1 || b < 1 || 2 * a + 1 > self.width as i64 || 2 * b + 1 > self.height as i64 {
                return Err(Error::invalid("SceneSpec", format!("primitive {i} does not fit the canvas")));
            }
            let (x, y) = p.center;
            if x < a || x > self.width as i64 - 1 - a || y < b || y > self.height as i64 - 1 - b {
                return Err(Error::invalid("SceneSpec", format!("primitive {i} starts outside the canvas")));
            }
            if !(p.darkening > 0.0 && p.darkening < 1.0) {
                return Err(Error::invalid("SceneSpec", format!("primitive {i} darkening must be in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Default,
    /// Every primitive covers less than 2% of the canvas.
    SmallShadow,
    /// Every primitive moves at least 4 px/frame along some axis.
    FastMotion,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::SmallShadow => "small-shadow",
            Preset::FastMotion => "fast-motion",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "small-shadow" => Ok(Preset::SmallShadow),
            "fast-motion" => Ok(Preset::FastMotion),
            other => Err(Error::invalid("Preset", format!("unknown preset '{other}'"))),
        }
    }
}

struct PresetRanges {
    count: (usize, usize),
    half_extent: (i64, i64),
    speed: (i64, i64),
    darkening: (f64, f64),
    noise: f64,
}

fn ranges(preset: Preset, size: usize) -> PresetRanges {
    let s = size as i64;
    match preset {
        Preset::Default => PresetRanges {
            count: (1, 3),
            half_extent: ((s / 16).max(1), (s / 5).max(1)),
            speed: (1, 3),
            darkening: (0.45, 0.7),
            noise: 0.02,
        },
        // (2a+1)(2b+1) < 0.02 * size^2
        Preset::SmallShadow => {
            let cap = libm::floor((libm::sqrt(0.02 * (size * size) as f64) - 1.0) / 2.0).max(1.0) as i64;
            PresetRanges { count: (1, 3), half_extent: ((cap / 2).max(1), cap), speed: (1, 3), darkening: (0.45, 0.7), noise: 0.02 }
        }
        Preset::FastMotion => PresetRanges {
            count: (1, 3),
            half_extent: ((s / 16).max(1), (s / 5).max(1)),
            speed: (4, 6),
            darkening: (0.55, 0.8),
            noise: 0.2,
        },
    }
}

/// Draws a random scene for `preset` on a `size` x `size` canvas.
pub fn random_scene<R: Rng + ?Sized>(preset: Preset, size: usize, frames: usize, rng: &mut R) -> Result<SceneSpec> {
    let r = ranges(preset, size);
    if 2 * r.half_extent.1 + 1 > size as i64 {
        return Err(Error::invalid("random_scene", format!("canvas {size} is too small")));
    }
    let count = rng.gen_range(r.count.0..=r.count.1);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.gen_bool(0.5) { PrimitiveShape::Ellipse } else { PrimitiveShape::Rectangle };
        let a = rng.gen_range(r.half_extent.0..=r.half_extent.1);
        let b = rng.gen_range(r.half_extent.0..=r.half_extent.1);
        let center = (rng.gen_range(a..=size as i64 - 1 - a), rng.gen_range(b..=size as i64 - 1 - b));
        let sign = |rng: &mut R| if rng.gen_bool(0.5) { 1 } else { -1 };
        let fast = sign(rng) * rng.gen_range(r.speed.0..=r.speed.1);
        let other = rng.gen_range(-r.speed.1..=r.speed.1);
        let velocity = if rng.gen_bool(0.5) { (fast, other) } else { (other, fast) };
        let darkening = rng.gen_range(r.darkening.0..r.darkening.1);
        primitives.push(ShadowPrimitive { shape, center, half_extent: (a, b), darkening, velocity });
    }
    Ok(SceneSpec {
        height: size,
        width: size,
        texture_seed: rng.gen(),
        noise_seed: rng.gen(),
        primitives,
        frames,
        noise: r.noise,
    })
}

/// Smooth RGB texture in roughly [0.3, 1]: a coarse and a finer random grid,
/// bilinearly upsampled and summed.
pub fn background_texture(height: usize, width: usize, seed: u64) -> Result<Tensor4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = Tensor4::random_uniform(Shape::new(1, 3, 5, 5), 0.35, 0.85, &mut rng);
    let fine = Tensor4::random_uniform(Shape::new(1, 3, 13, 13), -0.12, 0.12, &mut rng);
    let mut tex = resize_bilinear(&coarse, height, width)?;
    tex.add_assign(&resize_bilinear(&fine, height, width)?)?;
    Ok(tex.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedVideo {
    /// `(1, 3, H, W)` in [0, 1].
    pub frames: Vec<Tensor4>,
    /// `(1, 1, H, W)`, exactly 0 or 1.
    pub masks: Vec<Tensor4>,
    /// `flows[t]` lives on frame t+1's grid and samples frame t, so
    /// `warp(masks[t], flows[t]) == masks[t + 1]` for a single primitive.
    pub flows: Vec<FlowField>,
}

impl RenderedVideo {
    pub fn into_video(self, name: impl Into<String>) -> Video {
        Video { name: name.into(), frames: self.frames, masks: self.masks, flows: Some(self.flows) }
    }
}

pub fn render_video(spec: &SceneSpec) -> Result<RenderedVideo> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let texture = background_texture(h, w, spec.texture_seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let centers: Vec<_> = spec.primitives.iter().map(|p| p.center_at(t, h, w)).collect();

        let mut frame = texture.clone();
        let mut mask = Tensor4::zeros(Shape::new(1, 1, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut factor = 1.0;
                let mut covered = false;
                for (p, &c) in spec.primitives.iter().zip(&centers) {
                    if p.covers(c, x as i64, y as i64) {
                        factor *= p.darkening;
                        covered = true;
                    }
                }
                if covered {
                    mask.set(0, 0, y, x, 1.0);
                    for ch in 0..3 {
                        let v = frame.at(0, ch, y, x);
                        frame.set(0, ch, y, x, v * factor);
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            for v in frame.data_mut() {
                *v = (*v + noise_rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
            }
        }
        frames.push(frame);
        masks.push(mask);
    }
    let mut flows = Vec::with_capacity(spec.frames - 1);
    for t in 0..spec.frames - 1 {
        let mut flow = FlowField::zeros(1, h, w);
        for p in &spec.primitives {
            let c0 = p.center_at(t, h, w);
            let c1 = p.center_at(t + 1, h, w);
            let (u, v) = ((c0.0 - c1.0) as f64, (c0.1 - c1.1) as f64);
            let ft = flow.tensor_mut();
            for y in 0..h {
                for x in 0..w {
                    let (xi, yi) = (x as i64, y as i64);
                    if p.covers(c0, xi, yi) || p.covers(c1, xi, yi) {
                        ft.set(0, 0, y, x, u);
                        ft.set(0, 1, y, x, v);
                    }
                }
            }
        }
        flows.push(flow);
    }
    Ok(RenderedVideo { frames, masks, flows })
}

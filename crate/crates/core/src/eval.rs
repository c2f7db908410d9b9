//! Balanced error rate and the two-pass video inference protocol.

use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use crate::detector::{forward_pair, forward_single, DetectorParams, ForwardOptions};
use crate::error::{Error, Result};
use crate::flowwarp::FlowField;
use crate::tensor::{resize_bilinear, NormMode, Tensor4};
use crate::training::{pair_flows, FlowSource};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where `mask >= threshold`, else 0.
pub fn binarize(mask: &Tensor4, threshold: f64) -> Tensor4 {
    mask.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

/// Adds per-pixel counts of binary `pred` against binary `gt` (positive = 1).
pub fn accumulate_confusion(pred: &Tensor4, gt: &Tensor4, counts: &mut ConfusionCounts) -> Result<()> {
    pred.expect_shape("accumulate_confusion", gt.shape())?;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= DEFAULT_THRESHOLD, g >= DEFAULT_THRESHOLD) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(())
}

/// Error rates in percent. A class with no ground-truth pixels has no error
/// rate; the BER then averages only over the classes that are present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ber: Option<f64>,
    pub shadow_err: Option<f64>,
    pub nonshadow_err: Option<f64>,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub fn shadow_missing(&self) -> bool {
        self.shadow_err.is_none()
    }

    pub fn nonshadow_missing(&self) -> bool {
        self.nonshadow_err.is_none()
    }
}

pub fn compute_ber(counts: ConfusionCounts) -> MetricReport {
    let rate = |hit: u64, miss: u64| (hit + miss > 0).then(|| hit as f64 / (hit + miss) as f64);
    let tpr = rate(counts.tp, counts.fn_);
    let tnr = rate(counts.tn, counts.fp);
    let ber = match (tpr, tnr) {
        (Some(p), Some(n)) => Some(100.0 * (1.0 - 0.5 * (p + n))),
        (Some(r), None) | (None, Some(r)) => Some(100.0 * (1.0 - r)),
        (None, None) => None,
    };
    let err = |bad: u64, good: u64| (bad + good > 0).then(|| 100.0 * bad as f64 / (bad + good) as f64);
    MetricReport { ber, shadow_err: err(counts.fn_, counts.tp), nonshadow_err: err(counts.fp, counts.tn), counts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Final continuous mask per frame at native resolution.
    pub masks: Vec<Tensor4>,
    /// Per pair `(mask for frame i, mask for frame i+1)` at native resolution.
    pub passes: Vec<(Tensor4, Tensor4)>,
    /// Set when the video had a single frame and was run through one branch.
    pub single_frame: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    pub input_size: usize,
    pub flow_source: FlowSource,
    pub exchange: bool,
}

/// Runs every adjacent pair; interior frames average their two predictions.
/// `stored_flows[i]` is the flow for pair `(i, i+1)` at native resolution.
pub fn infer_video(
    frames: &[Tensor4],
    stored_flows: Option<&[FlowField]>,
    params: &DetectorParams,
    opts: InferenceOptions,
) -> Result<InferenceOutput> {
    let Some(first) = frames.first() else {
        return Err(Error::invalid("infer_video", "no frames"));
    };
    let (h, w) = (first.shape().h, first.shape().w);
    let n = opts.input_size;
    if frames.len() < 2 {
        let m = forward_single(&resize_bilinear(first, n, n)?, params, NormMode::Eval)?;
        return Ok(InferenceOutput { masks: alloc::vec![resize_bilinear(&m, h, w)?], passes: Vec::new(), single_frame: true });
    }
    if let Some(f) = stored_flows {
        if f.len() + 1 != frames.len() {
            return Err(Error::invalid("infer_video", "need one stored flow per adjacent pair"));
        }
    }
    let fwd_opts = ForwardOptions { mode: NormMode::Eval, exchange: opts.exchange };
    let resized: Vec<Tensor4> = frames.iter().map(|f| resize_bilinear(f, n, n)).collect::<Result<_>>()?;
    let mut passes = Vec::with_capacity(frames.len() - 1);
    for i in 0..frames.len() - 1 {
        let (a, b) = (&resized[i], &resized[i + 1]);
        let (fwd, bwd) = if opts.exchange {
            pair_flows(a, b, stored_flows.map(|f| &f[i]), opts.flow_source)?
        } else {
            (FlowField::zeros(1, n, n), FlowField::zeros(1, n, n))
        };
        let (ma, mb, _) = forward_pair(a, b, &fwd, &bwd, params, fwd_opts)?;
        passes.push((resize_bilinear(&ma, h, w)?, resize_bilinear(&mb, h, w)?));
    }
    let mut masks = Vec::with_capacity(frames.len());
    masks.push(passes[0].0.clone());
    for i in 1..frames.len() - 1 {
        masks.push(passes[i - 1].1.zip_map(&passes[i].0, |a, b| 0.5 * (a + b))?);
    }
    masks.push(passes[passes.len() - 1].1.clone());
    Ok(InferenceOutput { masks, passes, single_frame: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BackboneConfig;
    use crate::tensor::Shape;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(vals: &[f64], h: usize, w: usize) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, 1, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn binarize_tie_goes_positive() {
        let m = mask(&[0.6, 0.5, 0.4999, 0.0], 2, 2);
        assert_eq!(binarize(&m, 0.5).data(), &[1.0, 1.0, 0.0, 0.0]);
        assert!(binarize(&Tensor4::filled(Shape::new(1, 1, 3, 3), 0.6), 0.5).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn confusion_simple_cases() {
        let all = Tensor4::filled(Shape::new(1, 1, 4, 4), 1.0);
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&all, &all, &mut c).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 16, ..Default::default() });
        let gt = mask(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let inv = gt.map(|v| 1.0 - v);
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&inv, &gt, &mut c).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(accumulate_confusion(&all, &gt, &mut c).is_err());
    }

    #[test]
    fn ber_hand_case() {
        let r = compute_ber(ConfusionCounts { tp: 1, fn_: 1, tn: 3, fp: 1 });
        assert_eq!(r.ber, Some(37.5));
        assert_eq!(r.shadow_err, Some(50.0));
        assert_eq!(r.nonshadow_err, Some(25.0));
    }

    #[test]
    fn ber_extremes_and_missing_classes() {
        let gt = mask(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, 3);
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&gt, &gt, &mut c).unwrap();
        assert_eq!(compute_ber(c).ber, Some(0.0));
        let mut c = ConfusionCounts::default();
        accumulate_confusion(&gt.map(|v| 1.0 - v), &gt, &mut c).unwrap();
        assert_eq!(compute_ber(c).ber, Some(100.0));

        let r = compute_ber(ConfusionCounts { tn: 6, fp: 2, ..Default::default() });
        assert!(r.shadow_missing() && !r.nonshadow_missing());
        assert_eq!(r.ber, Some(25.0));
        assert_eq!(compute_ber(ConfusionCounts::default()).ber, None);
    }

    #[test]
    fn pooled_counts_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rand_mask = |rng: &mut ChaCha8Rng| mask(&(0..64).map(|_| rng.gen_range(0..2) as f64).collect::<Vec<_>>(), 8, 8);
        let (p1, g1, p2, g2) = (rand_mask(&mut rng), rand_mask(&mut rng), rand_mask(&mut rng), rand_mask(&mut rng));
        let mut a = ConfusionCounts::default();
        accumulate_confusion(&p1, &g1, &mut a).unwrap();
        let mut b = ConfusionCounts::default();
        accumulate_confusion(&p2, &g2, &mut b).unwrap();
        let mut both = ConfusionCounts::default();
        accumulate_confusion(&p1, &g1, &mut both).unwrap();
        accumulate_confusion(&p2, &g2, &mut both).unwrap();
        assert_eq!(a + b, both);
        assert_eq!(compute_ber(a + b), compute_ber(both));
        assert_eq!(both.total(), 128);
    }

    fn video(n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor4> {
        (0..n).map(|_| Tensor4::random_uniform(Shape::new(1, 3, 12, 20), 0.0, 1.0, rng)).collect()
    }

    fn opts() -> InferenceOptions {
        InferenceOptions { input_size: 16, flow_source: FlowSource::BlockMatch { block: 4, search: 2 }, exchange: true }
    }

    #[test]
    fn interior_frames_average_two_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BackboneConfig { widths: [4, 8, 8], ..BackboneConfig::default() };
        let mut params = DetectorParams::init(cfg, &mut rng).unwrap();
        params.into_t[1].w2.iter_mut().for_each(|v| *v = 0.3);
        let frames = video(4, &mut rng);
        let out = infer_video(&frames, None, &params, opts()).unwrap();
        assert_eq!(out.masks.len(), 4);
        assert_eq!(out.passes.len(), 3);
        assert!(!out.single_frame);
        assert_eq!(out.masks[0], out.passes[0].0);
        assert_eq!(out.masks[3], out.passes[2].1);
        for i in 1..3 {
            let (a, b) = (&out.passes[i - 1].1, &out.passes[i].0);
            for ((m, x), y) in out.masks[i].data().iter().zip(a.data()).zip(b.data()) {
                assert!((m - (x + y) / 2.0).abs() <= 1e-12);
            }
            assert_eq!(out.masks[i].shape(), Shape::new(1, 1, 12, 20));
        }
    }

    #[test]
    fn short_videos() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DetectorParams::init(BackboneConfig::default(), &mut rng).unwrap();
        let frames = video(2, &mut rng);
        let out = infer_video(&frames, None, &params, opts()).unwrap();
        assert_eq!(out.masks, vec![out.passes[0].0.clone(), out.passes[0].1.clone()]);
        let out = infer_video(&frames[..1], None, &params, opts()).unwrap();
        assert!(out.single_frame);
        assert_eq!(out.masks.len(), 1);
        assert!(infer_video(&[], None, &params, opts()).is_err());
    }
}

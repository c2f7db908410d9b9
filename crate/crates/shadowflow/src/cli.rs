//! Command-line interface. Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowflow_core::detector::DetectorParams;
use shadowflow_core::eval::{accumulate_confusion, binarize, compute_ber, infer_video, ConfusionCounts, InferenceOptions, MetricReport, DEFAULT_THRESHOLD};
use shadowflow_core::flownet::{estimate_flow_blockmatch, flowcnn_forward, DEFAULT_BLOCK, DEFAULT_SEARCH};
use shadowflow_core::flowwarp::{warp, FlowField};
use shadowflow_core::synthdata::{random_scene, render_video, Preset};
use shadowflow_core::training::{train_from, Dataset, FlowSource, TrainConfig};
use shadowflow_core::tensor::NormMode;
use shadowflow_core::Tensor4;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::{config, dataset, flo, fsutil, imageio, report};

#[derive(Debug, Parser)]
#[command(name = "shadowflow", version, about = "Video shadow detection with flow-guided feature exchange")]
pub struct Cli {
    /// Seed for data generation and training (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-shadow dataset.
    GenData(GenDataArgs),
    /// Train a detector and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (balanced error rate).
    Eval(EvalArgs),
    /// Predict masks for a directory of frames.
    Infer(InferArgs),
    /// Warp frame A onto frame B and write the result with an error heatmap.
    WarpDemo(WarpDemoArgs),
    /// Run a checkpoint's flow refinement network on a .flo file.
    FlowRefine(FlowRefineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Default,
    SmallShadow,
    FastMotion,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Default => Preset::Default,
            PresetArg::SmallShadow => Preset::SmallShadow,
            PresetArg::FastMotion => Preset::FastMotion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlowArg {
    GroundTruth,
    BlockMatch,
    Zero,
}

impl From<FlowArg> for FlowSource {
    fn from(f: FlowArg) -> FlowSource {
        match f {
            FlowArg::GroundTruth => FlowSource::GroundTruth,
            FlowArg::BlockMatch => FlowSource::BlockMatch { block: DEFAULT_BLOCK, search: DEFAULT_SEARCH },
            FlowArg::Zero => FlowSource::Zero,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 4)]
    pub videos: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train the baseline without feature exchange.
    #[arg(long)]
    pub no_fgwarp: bool,
    /// Override a config key, e.g. `--set max_iters=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present_any = ["oracle", "inverted_oracle"])]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dump_masks: Option<PathBuf>,
    /// Dump continuous masks instead of binarized ones.
    #[arg(long)]
    pub continuous: bool,
    /// Use the ground-truth masks as predictions.
    #[arg(long, conflicts_with = "inverted_oracle")]
    pub oracle: bool,
    /// Use the inverted ground-truth masks as predictions.
    #[arg(long)]
    pub inverted_oracle: bool,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub flow_source: FlowArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of frame images, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Directory of .flo files, one per adjacent pair; block matching otherwise.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub continuous: bool,
}

#[derive(Debug, Args)]
pub struct WarpDemoArgs {
    #[arg(long)]
    pub frame_a: PathBuf,
    #[arg(long)]
    pub frame_b: PathBuf,
    /// Flow on frame B's grid sampling frame A; block matching otherwise.
    #[arg(long)]
    pub flo: Option<PathBuf>,
    /// Refine the flow with this checkpoint's flow network.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlowRefineArgs {
    /// Flow on frame B's grid sampling frame A.
    #[arg(long)]
    pub flo: PathBuf,
    #[arg(long)]
    pub frame_a: PathBuf,
    #[arg(long)]
    pub frame_b: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train(&a, cli.seed),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::WarpDemo(a) => warp_demo(&a),
        Command::FlowRefine(a) => flow_refine(&a),
    }
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos = Vec::with_capacity(a.videos);
    for i in 0..a.videos {
        let spec = random_scene(a.preset.into(), a.size, a.frames, &mut rng)?;
        let areas = spec.primitives.iter().map(|p| p.area()).collect();
        videos.push((render_video(&spec)?.into_video(format!("video{i:03}")), areas));
    }
    let manifest = dataset::write_dataset(&a.out, &videos)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Resolves the effective training config: defaults, then the file, then
/// `--set` overrides, then the dedicated flags.
pub fn train_config(a: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => config::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        config::apply(&mut c, k, v)?;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    if a.no_fgwarp {
        c.fgwarp = false;
    }
    c.validate()?;
    Ok(c)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(a, seed)?;
    let data = dataset::read_dataset(&a.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = DetectorParams::init(cfg.backbone(), &mut rng)?;
    let quiet = a.quiet;
    let total = cfg.max_iters;
    let out = train_from(&data, &cfg, init, &mut rng, &mut |it, loss| {
        if !quiet && ((it + 1) % 100 == 0 || it + 1 == total) {
            eprintln!("iter {:>6}/{total}  loss {loss:.6}", it + 1);
        }
    })?;
    let ckpt = Checkpoint { params: out.params, exchange: cfg.fgwarp };
    checkpoint::save(&a.out, &ckpt, Some(&out.losses))?;
    println!("{}", a.out.display());
    Ok(())
}

/// Final per-frame masks for every video, pooled confusion counts and the report.
pub struct Evaluation {
    pub masks: Vec<Vec<Tensor4>>,
    pub report: MetricReport,
    pub frames: usize,
}

pub fn evaluate(data: &Dataset, ckpt: &Checkpoint, flow_source: FlowSource) -> Result<Evaluation> {
    let opts = InferenceOptions { input_size: ckpt.params.config.input_size, flow_source, exchange: ckpt.exchange };
    let mut masks = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        masks.push(infer_video(&v.frames, v.flows.as_deref(), &ckpt.params, opts)?.masks);
    }
    score(data, masks)
}

fn score(data: &Dataset, masks: Vec<Vec<Tensor4>>) -> Result<Evaluation> {
    let mut counts = ConfusionCounts::default();
    let mut frames = 0;
    for (v, pred) in data.videos.iter().zip(&masks) {
        for (p, g) in pred.iter().zip(&v.masks) {
            accumulate_confusion(&binarize(p, DEFAULT_THRESHOLD), g, &mut counts)?;
            frames += 1;
        }
    }
    Ok(Evaluation { masks, report: compute_ber(counts), frames })
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = dataset::read_dataset(&a.data)?;
    let evaluation = if a.oracle || a.inverted_oracle {
        let flip = a.inverted_oracle;
        let masks = data.videos.iter().map(|v| v.masks.iter().map(|m| if flip { m.map(|x| 1.0 - x) } else { m.clone() }).collect()).collect();
        score(&data, masks)?
    } else {
        let path = a.ckpt.as_ref().ok_or_else(|| Error::Usage("--ckpt is required".into()))?;
        evaluate(&data, &checkpoint::load(path)?, a.flow_source.into())?
    };
    if let Some(dir) = &a.dump_masks {
        let continuous = a.continuous;
        fsutil::write_dir_atomic(dir, |tmp| {
            for (v, masks) in data.videos.iter().zip(&evaluation.masks) {
                write_masks(&tmp.join(&v.name), masks, continuous)?;
            }
            Ok(())
        })?;
    }
    let text = report::render(&evaluation.report, data.videos.len(), evaluation.frames);
    fsutil::write_atomic(&a.out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn write_masks(dir: &Path, masks: &[Tensor4], continuous: bool) -> Result<()> {
    for (i, m) in masks.iter().enumerate() {
        let m = if continuous { m.clone() } else { binarize(m, DEFAULT_THRESHOLD) };
        imageio::write_gray(&dir.join(format!("{i:04}.png")), &m)?;
    }
    Ok(())
}

fn sorted_images(dir: &Path, ext: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| ext.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    out.sort();
    Ok(out)
}

fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let frames = sorted_images(&a.frames, &["png", "jpg", "jpeg"])?.iter().map(|p| imageio::read_rgb(p)).collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Usage(format!("no frames in {}", a.frames.display())));
    }
    let flows = match &a.flow {
        Some(d) => Some(sorted_images(d, &["flo"])?.iter().map(|p| flo::read(p)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let source = if flows.is_some() { FlowSource::GroundTruth } else { FlowArg::BlockMatch.into() };
    let opts = InferenceOptions { input_size: ckpt.params.config.input_size, flow_source: source, exchange: ckpt.exchange };
    let out = infer_video(&frames, flows.as_deref(), &ckpt.params, opts)?;
    if out.single_frame {
        eprintln!("note: single frame, predicted without a partner frame");
    }
    fsutil::write_dir_atomic(&a.out, |tmp| write_masks(tmp, &out.masks, a.continuous))?;
    println!("{}", a.out.display());
    Ok(())
}

fn read_pair(a: &Path, b: &Path) -> Result<(Tensor4, Tensor4)> {
    let (fa, fb) = (imageio::read_rgb(a)?, imageio::read_rgb(b)?);
    if fa.shape() != fb.shape() {
        return Err(Error::Usage(format!("frame sizes differ: {} vs {}", fa.shape(), fb.shape())));
    }
    Ok((fa, fb))
}

fn check_flow_size(flow: &FlowField, frame: &Tensor4, path: &Path) -> Result<()> {
    let s = frame.shape();
    if (flow.height(), flow.width()) != (s.h, s.w) {
        return Err(Error::Usage(format!("{}: flow is {}x{}, frames are {}x{}", path.display(), flow.width(), flow.height(), s.w, s.h)));
    }
    Ok(())
}

/// FlowCNN refinement of a flow on frame B's grid sampling frame A.
fn refine(raw: &FlowField, fa: &Tensor4, fb: &Tensor4, ckpt: &Checkpoint) -> Result<FlowField> {
    Ok(flowcnn_forward(raw, fb, fa, &ckpt.params.flowcnn, NormMode::Eval)?.0)
}

fn warp_demo(a: &WarpDemoArgs) -> Result<()> {
    let (fa, fb) = read_pair(&a.frame_a, &a.frame_b)?;
    let ckpt = a.ckpt.as_ref().map(|p| checkpoint::load(p)).transpose()?;
    let raw = match &a.flo {
        Some(p) => {
            let f = flo::read(p)?;
            check_flow_size(&f, &fa, p)?;
            f
        }
        None => {
            let s = fa.shape();
            estimate_flow_blockmatch(&fb, &fa, DEFAULT_BLOCK.min(s.h).min(s.w), DEFAULT_SEARCH)?
        }
    };
    let flow = match &ckpt {
        Some(c) => refine(&raw, &fa, &fb, c)?,
        None => raw,
    };
    let warped = warp(&fa, &flow)?;
    let s = fb.shape();
    let mut heat = Tensor4::zeros(s.with_channels(1));
    for y in 0..s.h {
        for x in 0..s.w {
            let d: f64 = (0..3).map(|c| (warped.at(0, c, y, x) - fb.at(0, c, y, x)).abs()).sum::<f64>() / 3.0;
            heat.set(0, 0, y, x, d);
        }
    }
    fsutil::write_dir_atomic(&a.out, |tmp| {
        imageio::write_rgb(&tmp.join("warped.png"), &warped)?;
        imageio::write_gray(&tmp.join("heatmap.png"), &heat)?;
        flo::write(&tmp.join("flow.flo"), &flow)
    })?;
    println!("{}", a.out.display());
    Ok(())
}

fn flow_refine(a: &FlowRefineArgs) -> Result<()> {
    let (fa, fb) = read_pair(&a.frame_a, &a.frame_b)?;
    let raw = flo::read(&a.flo)?;
    check_flow_size(&raw, &fa, &a.flo)?;
    let ckpt = checkpoint::load(&a.ckpt)?;
    let refined = refine(&raw, &fa, &fb, &ckpt)?;
    flo::write(&a.out, &refined)?;
    println!("{}", a.out.display());
    Ok(())
}

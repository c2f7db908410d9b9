//! Dataset directories.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<video>/frames/NNNN.png   8-bit RGB
//! <root>/<video>/masks/NNNN.png    8-bit grey, >= 128 is shadow
//! <root>/<video>/flow/NNNN.flo     flow for pair (NNNN, NNNN+1), optional
//! ```
//!
//! Without a manifest, every subdirectory holding `frames/` and `masks/` is
//! read as a video (PNG or JPEG frames, sorted by file name), so real
//! datasets with the same shape can be used directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use shadowflow_core::flowwarp::FlowField;
use shadowflow_core::training::{Dataset, Video};

use crate::error::{Error, Result};
use crate::{flo, fsutil, imageio};

const HEADER: &str = "shadowflow-dataset 1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub name: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel area of each shadow primitive, when the video is synthetic.
    pub areas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut m = format!("{HEADER}\n");
        for v in &self.videos {
            write!(m, "video {} {} {} {}", v.name, v.frames, v.height, v.width).unwrap();
            for a in &v.areas {
                write!(m, " {a}").unwrap();
            }
            m.push('\n');
        }
        m
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format(origin, "not a shadowflow dataset manifest"));
        }
        let mut videos = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let words: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::format(origin, format!("bad manifest line '{line}'"));
            if words.len() < 5 || words[0] != "video" {
                return Err(bad());
            }
            let nums: Vec<usize> = words[2..].iter().map(|w| w.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
            videos.push(VideoEntry {
                name: words[1].to_string(),
                frames: nums[0],
                height: nums[1],
                width: nums[2],
                areas: nums[3..].to_vec(),
            });
        }
        Ok(Manifest { videos })
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes `videos` (with optional per-primitive areas) under `root`,
/// replacing it, and returns the manifest path.
pub fn write_dataset(root: &Path, videos: &[(Video, Vec<usize>)]) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    for (v, areas) in videos {
        v.validate()?;
        let s = v.frames[0].shape();
        manifest.videos.push(VideoEntry { name: v.name.clone(), frames: v.frames.len(), height: s.h, width: s.w, areas: areas.clone() });
    }
    fsutil::write_dir_atomic(root, |tmp| {
        for (v, _) in videos {
            let dir = tmp.join(&v.name);
            for (i, (f, m)) in v.frames.iter().zip(&v.masks).enumerate() {
                imageio::write_rgb(&dir.join("frames").join(format!("{}.png", frame_name(i))), f)?;
                imageio::write_gray(&dir.join("masks").join(format!("{}.png", frame_name(i))), m)?;
            }
            for (i, f) in v.flows.iter().flatten().enumerate() {
                flo::write(&dir.join("flow").join(format!("{}.flo", frame_name(i))), f)?;
            }
        }
        fsutil::write_atomic(&tmp.join(MANIFEST), manifest.render().as_bytes())
    })?;
    Ok(root.join(MANIFEST))
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one video directory.
pub fn read_video(dir: &Path, name: &str) -> Result<Video> {
    let frames_p = sorted_files(&dir.join("frames"), &["png", "jpg", "jpeg"])?;
    let masks_p = sorted_files(&dir.join("masks"), &["png"])?;
    if frames_p.len() != masks_p.len() || frames_p.is_empty() {
        return Err(Error::format(dir, format!("{} frames but {} masks", frames_p.len(), masks_p.len())));
    }
    let frames = frames_p.iter().map(|p| imageio::read_rgb(p)).collect::<Result<Vec<_>>>()?;
    let masks = masks_p.iter().map(|p| imageio::read_mask(p)).collect::<Result<Vec<_>>>()?;
    let flow_dir = dir.join("flow");
    let flows = if flow_dir.is_dir() {
        let fp = sorted_files(&flow_dir, &["flo"])?;
        if fp.len() + 1 != frames.len() {
            return Err(Error::format(&flow_dir, format!("{} flow files for {} frames", fp.len(), frames.len())));
        }
        Some(fp.iter().map(|p| flo::read(p)).collect::<Result<Vec<FlowField>>>()?)
    } else {
        None
    };
    let video = Video { name: name.to_string(), frames, masks, flows };
    video.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(video)
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let p = root.join(MANIFEST);
    if !p.is_file() {
        return Ok(None);
    }
    Manifest::parse(&fsutil::read_text(&p)?, &p).map(Some)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let mut videos = Vec::new();
    match read_manifest(root)? {
        Some(m) => {
            for e in &m.videos {
                let v = read_video(&root.join(&e.name), &e.name)?;
                let s = v.frames[0].shape();
                if v.frames.len() != e.frames || (s.h, s.w) != (e.height, e.width) {
                    return Err(Error::format(root.join(MANIFEST), format!("video {} does not match its directory", e.name)));
                }
                videos.push(v);
            }
        }
        None => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("frames").is_dir() && p.join("masks").is_dir())
                .collect();
            dirs.sort();
            for d in dirs {
                let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                videos.push(read_video(&d, &name)?);
            }
        }
    }
    if videos.is_empty() {
        return Err(Error::format(root, "no videos found"));
    }
    Ok(Dataset { videos })
}

//! Checkpoint directories: `manifest.txt` plus one `<name>.t4` per tensor.
//!
//! ```text
//! shadowflow-checkpoint 1
//! widths 8 16 32
//! strides 2 2 2
//! input_size 64
//! exchange true
//! tensor backbone.s1.conv_a.weight weight 8 3 3 3
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowflow_core::detector::{BackboneConfig, DetectorParams};
use shadowflow_core::params::{NamedTensor, ParamStore};
use shadowflow_core::Shape;

use crate::error::{Error, Result};
use crate::{fsutil, t4};

const HEADER: &str = "shadowflow-checkpoint 1";
pub const MANIFEST: &str = "manifest.txt";
pub const LOSS_TRACE: &str = "losses.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    /// Whether the model was trained with the feature exchange enabled.
    pub exchange: bool,
}

fn manifest(ckpt: &Checkpoint, store: &ParamStore) -> String {
    let c = &ckpt.params.config;
    let mut m = String::new();
    writeln!(m, "{HEADER}").unwrap();
    writeln!(m, "widths {} {} {}", c.widths[0], c.widths[1], c.widths[2]).unwrap();
    writeln!(m, "strides {} {} {}", c.strides[0], c.strides[1], c.strides[2]).unwrap();
    writeln!(m, "input_size {}", c.input_size).unwrap();
    writeln!(m, "exchange {}", ckpt.exchange).unwrap();
    for e in &store.entries {
        let s = e.value.shape();
        writeln!(m, "tensor {} {} {} {} {} {}", e.name, e.kind.as_str(), s.n, s.c, s.h, s.w).unwrap();
    }
    m
}

/// Writes `ckpt` (and optionally a loss trace, one `iteration<TAB>loss` line
/// per step) to `dir`, replacing it.
pub fn save(dir: &Path, ckpt: &Checkpoint, losses: Option<&[f64]>) -> Result<()> {
    let store = ParamStore::capture(&ckpt.params);
    fsutil::write_dir_atomic(dir, |tmp| {
        for e in &store.entries {
            t4::write(&tmp.join(format!("{}.t4", e.name)), &e.value)?;
        }
        if let Some(l) = losses {
            fsutil::write_atomic(&tmp.join(LOSS_TRACE), format_losses(l).as_bytes())?;
        }
        fsutil::write_atomic(&tmp.join(MANIFEST), manifest(ckpt, &store).as_bytes())
    })
}

pub fn format_losses(losses: &[f64]) -> String {
    losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l:e}\n")).collect()
}

fn parse_triple(path: &Path, rest: &[&str]) -> Result<[usize; 3]> {
    let v: Vec<usize> = rest.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| Error::format(path, "bad integer"))?;
    v.try_into().map_err(|_| Error::format(path, "expected three integers"))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(Error::Usage(format!("no checkpoint at {}", dir.display())));
    }
    let text = fsutil::read_text(&mpath)?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format(&mpath, "not a shadowflow checkpoint manifest"));
    }
    let mut config = BackboneConfig::default();
    let mut exchange = true;
    let mut listed = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["widths", rest @ ..] => config.widths = parse_triple(&mpath, rest)?,
            ["strides", rest @ ..] => config.strides = parse_triple(&mpath, rest)?,
            ["input_size", n] => config.input_size = n.parse().map_err(|_| Error::format(&mpath, "bad input_size"))?,
            ["exchange", b] => exchange = b.parse().map_err(|_| Error::format(&mpath, "bad exchange flag"))?,
            ["tensor", name, kind, dims @ ..] if dims.len() == 4 => listed.push((name.to_string(), kind.to_string(), dims.to_vec())),
            _ => return Err(Error::format(&mpath, format!("unrecognised line '{line}'"))),
        }
    }
    let mut params = DetectorParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let template = ParamStore::capture(&params);
    if listed.len() != template.entries.len() {
        return Err(Error::format(&mpath, format!("{} tensors listed, model has {}", listed.len(), template.entries.len())));
    }
    let mut store = ParamStore::default();
    for ((name, kind, dims), want) in listed.iter().zip(&template.entries) {
        let dims: Vec<usize> = dims.iter().map(|d| d.parse()).collect::<Result<_, _>>().map_err(|_| Error::format(&mpath, "bad dimension"))?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if *name != want.name || kind != want.kind.as_str() || shape != want.value.shape() {
            return Err(Error::format(&mpath, format!("tensor {name} does not match the model layout (expected {})", want.name)));
        }
        let tpath = dir.join(format!("{name}.t4"));
        let value = t4::read(&tpath)?;
        if value.shape() != shape {
            return Err(Error::format(&tpath, format!("shape {} differs from manifest {shape}", value.shape())));
        }
        store.entries.push(NamedTensor { name: name.clone(), kind: want.kind, value });
    }
    store.apply_to(&mut params)?;
    Ok(Checkpoint { params, exchange })
}

//! Flat `key = value` training configuration files (`#` starts a comment).
//!
//! Keys: `base_lr`, `momentum`, `weight_decay`, `max_iters`, `poly_power`,
//! `k`, `input_size`, `seed`, `widths` (three integers), `fgwarp`
//! (true/false), `flow_source` (`ground-truth`, `block-match`, `zero`),
//! `flow_block`, `flow_search`.

use std::path::Path;

use shadowflow_core::flownet::{DEFAULT_BLOCK, DEFAULT_SEARCH};
use shadowflow_core::training::{FlowSource, TrainConfig};

use crate::error::{Error, Result};
use crate::fsutil;

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage(format!("config: invalid value '{value}' for {key}")))
}

/// Applies one `key = value` assignment to `config`.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let (key, value) = (key.trim(), value.trim());
    match key {
        "base_lr" => config.base_lr = parse(key, value)?,
        "momentum" => config.momentum = parse(key, value)?,
        "weight_decay" => config.weight_decay = parse(key, value)?,
        "max_iters" => config.max_iters = parse(key, value)?,
        "poly_power" => config.poly_power = parse(key, value)?,
        "k" => config.k = parse(key, value)?,
        "input_size" => config.input_size = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "fgwarp" => config.fgwarp = parse(key, value)?,
        "widths" => {
            let v: Vec<usize> = value
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| parse(key, s))
                .collect::<Result<_>>()?;
            config.widths = v.try_into().map_err(|_| Error::Usage("config: widths needs three values".into()))?;
        }
        "flow_source" => {
            config.flow_source = match value {
                "ground-truth" => FlowSource::GroundTruth,
                "block-match" => FlowSource::BlockMatch { block: DEFAULT_BLOCK, search: DEFAULT_SEARCH },
                "zero" => FlowSource::Zero,
                _ => return Err(Error::Usage(format!("config: unknown flow_source '{value}'"))),
            }
        }
        "flow_block" | "flow_search" => {
            let n: usize = parse(key, value)?;
            let FlowSource::BlockMatch { block, search } = &mut config.flow_source else {
                return Err(Error::Usage(format!("config: {key} needs flow_source = block-match first")));
            };
            *if key == "flow_block" { block } else { search } = n;
        }
        _ => return Err(Error::Usage(format!("config: unknown key '{key}'"))),
    }
    Ok(())
}

/// Parses `text` on top of `base`; later lines override earlier ones.
pub fn parse_str(text: &str, mut base: TrainConfig) -> Result<TrainConfig> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        apply(&mut base, k, v)?;
    }
    Ok(base)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    parse_str(&fsutil::read_text(path)?, TrainConfig::default())
}

/// Renders every field, in a form [`parse_str`] reads back.
pub fn render(c: &TrainConfig) -> String {
    let (source, extra) = match c.flow_source {
        FlowSource::GroundTruth => ("ground-truth", String::new()),
        FlowSource::Zero => ("zero", String::new()),
        FlowSource::BlockMatch { block, search } => ("block-match", format!("flow_block = {block}\nflow_search = {search}\n")),
    };
    format!(
        "base_lr = {}\nmomentum = {}\nweight_decay = {}\nmax_iters = {}\npoly_power = {}\nk = {}\ninput_size = {}\nseed = {}\nwidths = {} {} {}\nfgwarp = {}\nflow_source = {source}\n{extra}",
        c.base_lr, c.momentum, c.weight_decay, c.max_iters, c.poly_power, c.k, c.input_size, c.seed,
        c.widths[0], c.widths[1], c.widths[2], c.fgwarp,
    )
}

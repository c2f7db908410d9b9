//! Metric reports as flat `key = value` text.

use std::fmt::Write as _;

use shadowflow_core::eval::{ConfusionCounts, MetricReport};

use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x}"))
}

pub fn render(r: &MetricReport, videos: usize, frames: usize) -> String {
    let c = r.counts;
    let mut s = String::new();
    writeln!(s, "ber = {}", opt(r.ber)).unwrap();
    writeln!(s, "shadow_err = {}", opt(r.shadow_err)).unwrap();
    writeln!(s, "nonshadow_err = {}", opt(r.nonshadow_err)).unwrap();
    writeln!(s, "shadow_missing = {}", r.shadow_missing()).unwrap();
    writeln!(s, "nonshadow_missing = {}", r.nonshadow_missing()).unwrap();
    writeln!(s, "tp = {}\ntn = {}\nfp = {}\nfn = {}", c.tp, c.tn, c.fp, c.fn_).unwrap();
    writeln!(s, "videos = {videos}\nframes = {frames}").unwrap();
    s
}

/// Reads back the counts of a rendered report.
pub fn parse_counts(text: &str) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let slot = match k.trim() {
            "tp" => &mut c.tp,
            "tn" => &mut c.tn,
            "fp" => &mut c.fp,
            "fn" => &mut c.fn_,
            _ => continue,
        };
        *slot = v.trim().parse().map_err(|_| Error::Usage(format!("report: bad count '{}'", v.trim())))?;
    }
    Ok(c)
}

/// Value of `key` in a rendered report (`None` for absent keys or `none`).
pub fn field(text: &str, key: &str) -> Option<f64> {
    text.lines().filter_map(|l| l.split_once('=')).find(|(k, _)| k.trim() == key).and_then(|(_, v)| v.trim().parse().ok())
}

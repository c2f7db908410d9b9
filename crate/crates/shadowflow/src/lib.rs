//! File formats, dataset IO and the command-line front end for
//! [`shadowflow_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flo;
pub mod fsutil;
pub mod imageio;
pub mod report;
pub mod t4;

pub use error::{Error, Result};

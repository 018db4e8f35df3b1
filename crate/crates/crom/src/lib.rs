//! Pipeline layer: configuration, artifact files, plots, canned experiments
//! and the `crom` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod plot;

pub use error::{Error, Result};

//! File formats, dataset generation and run orchestration around
//! `stcl-core`, plus the `stcl` command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod diag;
pub mod error;
pub mod featio;
pub mod kv;
pub mod pnm;
pub mod run;
pub mod stnt;

pub use error::{Error, Result};
